//! Microscopic perforated-domain solves, effectiveness functionals, and the
//! ε-ladder studies comparing them with their homogenized limits.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::homog::{
    cell_effective_matrix, coefficients, critical_reaction, solve_homogenized, sphere_area,
    strange_coefficient, HomogError, LimitModel, ScalingLaw,
};
use crate::mesh::{
    build_cell_mesh, build_plain_mesh, integrate, tile_perforated, BoundaryTag, GridFunction,
    MeshError, PlainDomain, Region, StarShape, TriMesh,
};
use crate::pde::{
    solve_radial, solve_semilinear, EllipticSpec, Kinetics, PdeError, RadialEnd, RadialProfile,
    RadialSpec, Reaction, Source,
};

#[derive(Debug, Error)]
pub enum MicroError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("mesh error: {0}")]
    Mesh(#[from] MeshError),
    #[error("pde error: {0}")]
    Pde(#[from] PdeError),
    #[error("homogenization error: {0}")]
    Homog(#[from] HomogError),
}

/// Reaction–diffusion problem on Ω = (0,1)² perforated by a periodic array
/// of holes: −Δw = f̂ in Ω_ε, ∂w/∂ν + β(ε)σ̂(w) = β(ε)ĝ on the hole
/// boundaries, w = boundary_value on ∂Ω.
#[derive(Clone)]
pub struct PerforatedProblem {
    pub law: ScalingLaw,
    pub shape: StarShape,
    pub n_cells: Vec<usize>,
    pub kinetics: Kinetics,
    pub f_hat: f64,
    pub g_hat: f64,
    pub boundary_value: f64,
    pub n_theta: usize,
    pub n_r: usize,
    pub plain_resolution: usize,
}

impl PerforatedProblem {
    pub fn new(
        law: ScalingLaw,
        shape: StarShape,
        n_cells: Vec<usize>,
        kinetics: Kinetics,
    ) -> Result<Self, MicroError> {
        if law.n != 2 || law.p != 2.0 {
            return Err(MicroError::Argument(format!(
                "microscopic runs are two-dimensional with p = 2 (got n = {}, p = {})",
                law.n, law.p
            )));
        }
        if n_cells.is_empty() {
            return Err(MicroError::Argument("ladder of n_cells values is empty".into()));
        }
        let prob = PerforatedProblem {
            law,
            shape,
            n_cells,
            kinetics,
            f_hat: 0.0,
            g_hat: 0.0,
            boundary_value: 1.0,
            n_theta: 16,
            n_r: 6,
            plain_resolution: 48,
        };
        for idx in 0..prob.n_cells.len() {
            let eps = prob.eps(idx);
            let reach = prob.law.a_eps(eps) * prob.shape.max_radius();
            if !(reach < eps / 2.0) {
                return Err(MicroError::Argument(format!(
                    "hole of reach {reach} does not fit in the ε = {eps} cell"
                )));
            }
        }
        Ok(prob)
    }

    pub fn eps(&self, eps_index: usize) -> f64 {
        1.0 / self.n_cells[eps_index] as f64
    }

    /// Elliptic data shared by the microscopic solves and (after the limit
    /// rewrites it) the homogenized ones; the kinetics weight is β(ε).
    fn seed(&self, eps: f64) -> EllipticSpec {
        let mut spec = EllipticSpec::laplace();
        spec.boundary_kinetics = Some((self.kinetics.clone().arc(), self.law.beta(eps)));
        spec.boundary_source = self.g_hat;
        spec.volume_source = Source::Constant(self.f_hat);
        spec.dirichlet = self.boundary_value;
        spec
    }

    fn cell(&self, eps: f64) -> Result<TriMesh, MicroError> {
        let a_rel = self.law.a_eps(eps) / eps;
        Ok(build_cell_mesh(&self.shape, a_rel, self.n_theta, self.n_r)?)
    }
}

/// The perforated mesh of ladder rung `eps_index`.
pub fn perforated_mesh(prob: &PerforatedProblem, eps_index: usize) -> Result<TriMesh, MicroError> {
    let cell = prob.cell(prob.eps(eps_index))?;
    Ok(tile_perforated(&cell, prob.n_cells[eps_index])?)
}

/// Solves the Robin problem on the perforated domain of rung `eps_index`.
pub fn solve_perforated(
    prob: &PerforatedProblem,
    eps_index: usize,
) -> Result<GridFunction, MicroError> {
    let mesh = perforated_mesh(prob, eps_index)?;
    let spec = prob.seed(prob.eps(eps_index));
    Ok(solve_semilinear(&mesh, &spec)?.u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectivenessMode {
    /// Surface mean over the hole boundaries S_ε.
    Micro,
    /// Volume mean over the (unperforated) domain.
    Homog,
}

/// Effectiveness 𝓔 and ineffectiveness η of a solution field: 𝓔 is the mean
/// of σ̂(w) over the catalytic surface (micro) or the domain (homog), and
/// η the mean of σ̂(1) − σ̂(w), so η = σ̂(1) − 𝓔 up to quadrature rounding.
pub fn effectiveness(
    mesh: &TriMesh,
    solution: &GridFunction,
    kinetics: &Kinetics,
    mode: EffectivenessMode,
) -> Result<(f64, f64), MicroError> {
    if solution.len() != mesh.nodes().len() {
        return Err(MicroError::Argument("solution does not live on this mesh".into()));
    }
    let sigma_one = kinetics.eval(1.0);
    let reacted = GridFunction::from_values(
        solution.values().iter().map(|&w| kinetics.eval(w)).collect(),
    );
    let deficit = GridFunction::from_values(
        reacted.values().iter().map(|&s| sigma_one - s).collect(),
    );
    match mode {
        EffectivenessMode::Micro => {
            if !mesh.has_tag(BoundaryTag::Particle) {
                return Err(MicroError::Argument(
                    "micro effectiveness needs Particle boundary edges".into(),
                ));
            }
            let surface = mesh.boundary_length(BoundaryTag::Particle);
            let e = integrate(mesh, &reacted, Region::Boundary(BoundaryTag::Particle))? / surface;
            let eta = integrate(mesh, &deficit, Region::Boundary(BoundaryTag::Particle))? / surface;
            Ok((e, eta))
        }
        EffectivenessMode::Homog => {
            let vol = mesh.total_area();
            let e = integrate(mesh, &reacted, Region::Domain)? / vol;
            let eta = integrate(mesh, &deficit, Region::Domain)? / vol;
            Ok((e, eta))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EffectivenessReport {
    pub e_micro: f64,
    pub eta_micro: f64,
    pub e_homog: f64,
    pub eta_homog: f64,
    pub gap: f64,
    pub l2_error: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LadderEntry {
    pub n_cells: usize,
    pub eps: f64,
    pub a_eps: f64,
    /// Total hole surface |S_ε| of the rung.
    pub surface: f64,
    /// Raw reaction magnitude β(ε)·∫_{S_ε} σ̂(w_ε).
    pub boundary_reaction: f64,
    pub report: EffectivenessReport,
}

/// Which homogenized limit the microscopic ladder is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MicroRegime {
    /// α = 1: cell-matrix diffusion with surface-density reaction weight.
    Big,
    /// α > 1 with finite positive β₀: identity diffusion, volume reaction β₀σ̂.
    Subcritical,
    /// α > 1 with β₀ = 0: the reaction vanishes and the limit is Poisson.
    Supercritical,
}

/// Runs the ε-ladder: one microscopic solve per rung against the single
/// homogenized limit field, reporting effectiveness gaps and L²(Ω_ε) errors.
pub fn convergence_study(
    prob: &PerforatedProblem,
    regime: MicroRegime,
) -> Result<Vec<LadderEntry>, MicroError> {
    let eps0 = prob.eps(0);
    let coeffs = coefficients(&prob.law, &prob.shape, eps0)?;
    let b0 = coeffs.beta0;
    match regime {
        MicroRegime::Big if prob.law.alpha != 1.0 => {
            return Err(MicroError::Argument(format!(
                "big-hole ladder needs α = 1, got {}",
                prob.law.alpha
            )));
        }
        MicroRegime::Subcritical if prob.law.alpha <= 1.0 || !matches!(b0, Some(b) if b > 0.0) => {
            return Err(MicroError::Argument(format!(
                "subcritical ladder needs α > 1 and finite positive β₀, got α = {}, β₀ = {:?}",
                prob.law.alpha, b0
            )));
        }
        MicroRegime::Supercritical if prob.law.alpha <= 1.0 || b0 != Some(0.0) => {
            return Err(MicroError::Argument(format!(
                "supercritical ladder needs α > 1 and vanishing β₀, got α = {}, β₀ = {:?}",
                prob.law.alpha, b0
            )));
        }
        _ => {}
    }

    let plain = build_plain_mesh(
        PlainDomain::Rect { w: 1.0, h: 1.0 },
        prob.plain_resolution,
    )?;
    let seed = prob.seed(eps0);
    let big_cell = match regime {
        MicroRegime::Big => Some(cell_effective_matrix(&prob.cell(eps0)?)?),
        _ => None,
    };
    let w_hom = match regime {
        MicroRegime::Big => solve_homogenized(
            &plain,
            LimitModel::Big,
            &seed,
            &coeffs,
            big_cell.as_ref(),
            None,
        )?,
        _ => solve_homogenized(&plain, LimitModel::Subcritical, &seed, &coeffs, None, None)?,
    };
    let (e_homog, eta_homog) = effectiveness(&plain, &w_hom, &prob.kinetics, EffectivenessMode::Homog)?;

    let mut table = Vec::with_capacity(prob.n_cells.len());
    for idx in 0..prob.n_cells.len() {
        let eps = prob.eps(idx);
        let cell = match &big_cell {
            // α = 1 keeps the same relative hole on every rung
            Some(_) => prob.cell(eps0)?,
            None => prob.cell(eps)?,
        };
        let tiled = tile_perforated(&cell, prob.n_cells[idx])?;
        let w_eps = solve_semilinear(&tiled, &prob.seed(eps))?.u;
        let (e_micro, eta_micro) =
            effectiveness(&tiled, &w_eps, &prob.kinetics, EffectivenessMode::Micro)?;

        let sampled = sample_at(&plain, &w_hom, tiled.nodes())?;
        let sq = GridFunction::from_values(
            w_eps
                .values()
                .iter()
                .zip(&sampled)
                .map(|(a, b)| (a - b) * (a - b))
                .collect(),
        );
        let l2_error = integrate(&tiled, &sq, Region::Domain)?.max(0.0).sqrt();

        let surface = tiled.boundary_length(BoundaryTag::Particle);
        table.push(LadderEntry {
            n_cells: prob.n_cells[idx],
            eps,
            a_eps: prob.law.a_eps(eps),
            surface,
            boundary_reaction: prob.law.beta(eps) * e_micro * surface,
            report: EffectivenessReport {
                e_micro,
                eta_micro,
                e_homog,
                eta_homog,
                gap: (e_micro - e_homog).abs(),
                l2_error,
            },
        });
    }
    Ok(table)
}

/// One CSV row per ladder rung.
pub fn study_csv(table: &[LadderEntry]) -> String {
    let mut out = String::from("n_cells,eps,a_eps,E_micro,E_homog,gap,l2_error,boundary_reaction\n");
    for e in table {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            e.n_cells,
            e.eps,
            e.a_eps,
            e.report.e_micro,
            e.report.e_homog,
            e.report.gap,
            e.report.l2_error,
            e.boundary_reaction,
        );
    }
    out
}

fn tri_neighbors(mesh: &TriMesh) -> Vec<[Option<usize>; 3]> {
    let mut half: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    let mut nb = vec![[None; 3]; mesh.tris().len()];
    for (t, tri) in mesh.tris().iter().enumerate() {
        for k in 0..3 {
            let (i, j) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
            let key = (i.min(j), i.max(j));
            match half.remove(&key) {
                None => {
                    half.insert(key, (t, k));
                }
                Some((s, m)) => {
                    nb[t][k] = Some(s);
                    nb[s][m] = Some(t);
                }
            }
        }
    }
    nb
}

fn barycentric(mesh: &TriMesh, t: usize, p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = mesh.tris()[t];
    let (pa, pb, pc) = (mesh.nodes()[a], mesh.nodes()[b], mesh.nodes()[c]);
    let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
    let lb = ((p[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (p[1] - pa[1])) / det;
    let lc = ((pb[0] - pa[0]) * (p[1] - pa[1]) - (p[0] - pa[0]) * (pb[1] - pa[1])) / det;
    [1.0 - lb - lc, lb, lc]
}

/// Samples a nodal field at arbitrary points by barycentric interpolation,
/// locating each point by walking across triangle neighbors from the last
/// hit; points that sit a sliver outside every triangle (boundary rounding)
/// are projected onto the least-violated one.
pub fn sample_at(
    mesh: &TriMesh,
    field: &GridFunction,
    points: &[[f64; 2]],
) -> Result<Vec<f64>, MicroError> {
    if field.len() != mesh.nodes().len() {
        return Err(MicroError::Argument("field does not live on this mesh".into()));
    }
    if mesh.tris().is_empty() {
        return Err(MicroError::Argument("mesh has no triangles".into()));
    }
    let nb = tri_neighbors(mesh);
    let mut cur = 0usize;
    let mut out = Vec::with_capacity(points.len());
    for &p in points {
        let mut found: Option<(usize, [f64; 3])> = None;
        let mut t = cur;
        for _ in 0..mesh.tris().len() {
            let l = barycentric(mesh, t, p);
            let (k, lk) = (0..3).map(|i| (i, l[i])).fold(
                (0, f64::INFINITY),
                |acc, x| if x.1 < acc.1 { x } else { acc },
            );
            if lk >= -1e-12 {
                found = Some((t, l));
                break;
            }
            match nb[t][k] {
                Some(s) => t = s,
                None => break,
            }
        }
        let (t, l) = match found {
            Some(hit) => hit,
            None => {
                // stuck at the boundary or cycled: scan for the best fit
                let mut best = (0usize, f64::NEG_INFINITY);
                for s in 0..mesh.tris().len() {
                    let l = barycentric(mesh, s, p);
                    let min = l[0].min(l[1]).min(l[2]);
                    if min > best.1 {
                        best = (s, min);
                    }
                }
                if best.1 < -1e-6 {
                    return Err(MicroError::Argument(format!(
                        "point ({}, {}) lies outside the mesh",
                        p[0], p[1]
                    )));
                }
                let l = barycentric(mesh, best.0, p);
                let clamped = [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)];
                let sum = clamped[0] + clamped[1] + clamped[2];
                (best.0, [clamped[0] / sum, clamped[1] / sum, clamped[2] / sum])
            }
        };
        cur = t;
        let tri = mesh.tris()[t];
        out.push(
            l[0] * field.values()[tri[0]]
                + l[1] * field.values()[tri[1]]
                + l[2] * field.values()[tri[2]],
        );
    }
    Ok(out)
}

#[derive(Debug)]
pub struct CompareReport {
    pub w_crit: RadialProfile,
    pub w_non: RadialProfile,
    /// min over the shared grid of w_crit − w_non.
    pub min_diff: f64,
    pub e_crit: f64,
    pub e_non: f64,
}

fn ball_mean(profile: &RadialProfile, kinetics: &Kinetics, n: u32) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..profile.r.len() - 1 {
        let (r0, r1) = (profile.r[k], profile.r[k + 1]);
        let w = |r: f64, v: f64| kinetics.eval(v) * r.powi(n as i32 - 1);
        num += 0.5 * (r1 - r0) * (w(r0, profile.values[k]) + w(r1, profile.values[k + 1]));
        den += 0.5 * (r1 - r0) * (r0.powi(n as i32 - 1) + r1.powi(n as i32 - 1));
    }
    num / den
}

/// Solves the critical and noncritical homogenized limits of the unit-ball
/// problem with boundary value 1 and no volume source, on one radial grid:
/// the critical limit carries the strange-term reaction with weight 𝒜, the
/// noncritical one the bare kinetics with weight 𝒜̂ = C₀^{n−1}|∂G₀|.  The
/// cited comparison theorem predicts w_crit ≥ w_non pointwise.
pub fn compare_critical_noncritical(
    kinetics: Kinetics,
    c0: f64,
    n_points: usize,
) -> Result<CompareReport, MicroError> {
    if !kinetics.jumps().is_empty() {
        return Err(MicroError::Argument(
            "pointwise comparison needs continuous kinetics".into(),
        ));
    }
    let (n, p) = (3u32, 2.0);
    let a_strange = strange_coefficient(n, p, c0)?;
    let a_hat = c0.powi(n as i32 - 1) * sphere_area(n);
    let crit = critical_reaction(kinetics.clone(), n, p, c0)?;
    let base = RadialSpec {
        n,
        p,
        r0: 0.0,
        r1: 1.0,
        n_points,
        volume_reaction: None,
        volume_source: 0.0,
        left: RadialEnd::Robin(0.0),
        right: RadialEnd::Dirichlet(1.0),
    };
    let mut cs = base.clone();
    cs.volume_reaction = Some((crit.reaction(), a_strange));
    let w_crit = solve_radial(&cs)?;
    let mut ns = base;
    ns.volume_reaction = Some((kinetics.clone().arc(), a_hat));
    let w_non = solve_radial(&ns)?;

    let min_diff = w_crit
        .values
        .iter()
        .zip(&w_non.values)
        .map(|(a, b)| a - b)
        .fold(f64::INFINITY, f64::min);
    let e_crit = ball_mean(&w_crit, &kinetics, n);
    let e_non = ball_mean(&w_non, &kinetics, n);
    Ok(CompareReport { w_crit, w_non, min_diff, e_crit, e_non })
}

/// Effectiveness of the subcritical limit for an equal-area disk and square
/// obstacle: β₀ = C₀|∂G₀| in 2D, and the disk minimizes the perimeter, so it
/// should maximize the effectiveness.  Returns (𝓔_disk, 𝓔_square).
pub fn beta0_shape_comparison(
    kinetics: &Kinetics,
    c0: f64,
    resolution: usize,
) -> Result<(f64, f64), MicroError> {
    let n_theta = 256;
    let disk = StarShape::disk(n_theta)?;
    let law = ScalingLaw::power(2, 2.0, c0, 2.0, 0.0)?;
    let disk_coeffs = coefficients(&law, &disk, 0.1)?;

    // match the polygonized areas exactly, not just the ideal shapes'
    let rough = StarShape::square(0.5, n_theta)?;
    let rough_area = coefficients(&law, &rough, 0.1)?.obstacle_volume;
    let half = 0.5 * (disk_coeffs.obstacle_volume / rough_area).sqrt();
    let square = StarShape::square(half, n_theta)?;
    let square_coeffs = coefficients(&law, &square, 0.1)?;

    let mesh = build_plain_mesh(PlainDomain::Rect { w: 1.0, h: 1.0 }, resolution)?;
    let mut seed = EllipticSpec::laplace();
    seed.dirichlet = 1.0;
    seed.boundary_kinetics = Some((kinetics.clone().arc(), 1.0));

    let mut out = [0.0; 2];
    for (slot, coeffs) in [(0, &disk_coeffs), (1, &square_coeffs)] {
        let w = solve_homogenized(&mesh, LimitModel::Subcritical, &seed, coeffs, None, None)?;
        out[slot] = effectiveness(&mesh, &w, kinetics, EffectivenessMode::Homog)?.0;
    }
    Ok((out[0], out[1]))
}
