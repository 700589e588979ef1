//! Homogenization toolbox for perforated reaction–diffusion problems:
//! closed-form scaling constants, the strange-term nonlinearity H and its
//! exterior-problem oracle, periodic cell problems with the effective
//! diffusion matrix, the radial corrector, and the limit solvers.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::linalg::{cg_jacobi, Csr};
use crate::mesh::{BoundaryTag, GridFunction, MeshError, StarShape, TriMesh};
use crate::pde::{
    basis_gradients, solve_radial, solve_semilinear, tri_gradient, EllipticSpec, Kinetics,
    PdeError, RadialEnd, RadialProfile, RadialSpec, Reaction, Source,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HomogError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("kinetics unsuitable: {0}")]
    Kinetics(String),
    #[error("mesh error: {0}")]
    Mesh(#[from] MeshError),
    #[error("pde error: {0}")]
    Pde(#[from] PdeError),
}

const JUMP_TOL: f64 = 1e-12;
const BISECT_TOL: f64 = 1e-12;

/// Surface area of the unit sphere S^{n−1} in ℝⁿ.
pub fn sphere_area(n: u32) -> f64 {
    assert!(n >= 1, "dimension must be positive");
    if n == 1 {
        return 2.0;
    }
    let mut prev = 2.0; // |S⁰|
    let mut cur = 2.0 * PI; // |S¹|
    for k in 3..=n {
        let next = 2.0 * PI * prev / (k as f64 - 2.0);
        prev = cur;
        cur = next;
    }
    cur
}

fn signed_pow(d: f64, e: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        d.signum() * d.abs().powf(e)
    }
}

fn check_npc(n: u32, p: f64, c0: f64) -> Result<(), HomogError> {
    if n < 2 {
        return Err(HomogError::Argument(format!("dimension n = {n} must be at least 2")));
    }
    if !(p > 1.0) || !p.is_finite() {
        return Err(HomogError::Argument(format!("exponent p = {p} must lie in (1, ∞)")));
    }
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(HomogError::Argument(format!("scale constant C₀ = {c0} must be positive")));
    }
    Ok(())
}

/// Capacity-type constant in front of the strange term,
/// ((n−p)/(p−1))^{p−1} C₀^{n−p} |S^{n−1}|.  Defined for p < n.
pub fn strange_coefficient(n: u32, p: f64, c0: f64) -> Result<f64, HomogError> {
    check_npc(n, p, c0)?;
    let nf = n as f64;
    if p >= nf {
        return Err(HomogError::Argument(format!(
            "strange-term coefficient needs p < n, got p = {p}, n = {n}"
        )));
    }
    Ok(((nf - p) / (p - 1.0)).powf(p - 1.0) * c0.powf(nf - p) * sphere_area(n))
}

/// Coefficient of the monotone power in the H-equation,
/// ((n−p)/(C₀(p−1)))^{p−1}.  Defined for p < n.
pub fn b_zero(n: u32, p: f64, c0: f64) -> Result<f64, HomogError> {
    check_npc(n, p, c0)?;
    let nf = n as f64;
    if p >= nf {
        return Err(HomogError::Argument(format!(
            "B₀ needs p < n, got p = {p}, n = {n}"
        )));
    }
    Ok(((nf - p) / (c0 * (p - 1.0))).powf(p - 1.0))
}

/// Asymptotic regime of a hole/reaction scaling law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Big,
    Subcritical,
    Critical,
    Supercritical,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Big => "big",
            Regime::Subcritical => "subcritical",
            Regime::Critical => "critical",
            Regime::Supercritical => "supercritical",
        }
    }
}

/// Hole size a_ε and surface-reaction intensity β(ε) = ε^{−γ} as functions
/// of the period ε.  Power laws read a_ε = C₀ε^α; the exponential law is the
/// borderline p = n size a_ε = ε·exp(−ε^{−n/(n−1)}).
#[derive(Debug, Clone)]
pub struct ScalingLaw {
    pub n: u32,
    pub p: f64,
    pub c0: f64,
    pub alpha: f64,
    pub gamma: f64,
    exponential: bool,
}

impl ScalingLaw {
    pub fn power(n: u32, p: f64, c0: f64, alpha: f64, gamma: f64) -> Result<Self, HomogError> {
        check_npc(n, p, c0)?;
        if !(alpha >= 1.0) || !alpha.is_finite() {
            return Err(HomogError::Argument(format!(
                "hole exponent α = {alpha} must be at least 1 (holes no larger than the period)"
            )));
        }
        if !gamma.is_finite() {
            return Err(HomogError::Argument(format!("reaction exponent γ = {gamma} must be finite")));
        }
        Ok(ScalingLaw { n, p, c0, alpha, gamma, exponential: false })
    }

    /// The p = n critical law; no power of ε reaches this scale.
    pub fn exponential(n: u32, gamma: f64) -> Result<Self, HomogError> {
        if n < 2 {
            return Err(HomogError::Argument(format!("dimension n = {n} must be at least 2")));
        }
        if !gamma.is_finite() {
            return Err(HomogError::Argument(format!("reaction exponent γ = {gamma} must be finite")));
        }
        Ok(ScalingLaw { n, p: n as f64, c0: 1.0, alpha: 1.0, gamma, exponential: true })
    }

    pub fn is_exponential(&self) -> bool {
        self.exponential
    }

    pub fn a_eps(&self, eps: f64) -> f64 {
        if self.exponential {
            let n = self.n as f64;
            eps * (-eps.powf(-n / (n - 1.0))).exp()
        } else {
            self.c0 * eps.powf(self.alpha)
        }
    }

    pub fn beta(&self, eps: f64) -> f64 {
        eps.powf(-self.gamma)
    }

    /// Reaction normalizer β*(ε) = a_ε^{1−n} εⁿ.
    pub fn beta_star(&self, eps: f64) -> f64 {
        self.a_eps(eps).powf(1.0 - self.n as f64) * eps.powi(self.n as i32)
    }

    /// Exponent γ* = α(n−1) − n separating vanishing from divergent β₀.
    /// Undefined for the exponential law.
    pub fn gamma_star(&self) -> Option<f64> {
        if self.exponential {
            None
        } else {
            Some(self.alpha * (self.n as f64 - 1.0) - self.n as f64)
        }
    }

    /// Size a*_ε below which holes stop influencing the limit.
    pub fn critical_scale(&self, eps: f64) -> f64 {
        let n = self.n as f64;
        if self.p < n {
            eps.powf(n / (n - self.p))
        } else if self.p == n {
            eps * (-eps.powf(-n / (n - 1.0))).exp()
        } else {
            0.0
        }
    }

    pub fn critical_law(&self) -> String {
        let n = self.n as f64;
        if self.p < n {
            format!("eps^{}", n / (n - self.p))
        } else if self.p == n {
            format!("eps*exp(-eps^(-{}))", n / (n - 1.0))
        } else {
            "0".to_string()
        }
    }

    pub fn regime(&self) -> Regime {
        let n = self.n as f64;
        if self.exponential {
            return Regime::Critical;
        }
        if self.alpha == 1.0 {
            return Regime::Big;
        }
        if self.p < n {
            let crit = n / (n - self.p);
            if self.alpha < crit {
                Regime::Subcritical
            } else if self.alpha == crit {
                Regime::Critical
            } else {
                Regime::Supercritical
            }
        } else {
            // p ≥ n: every power of ε stays above the critical size.
            Regime::Subcritical
        }
    }

    /// Surface moment μ_ε = ε^{−n} a_ε^{n−1} |∂G₀| / (1 − (a_ε/ε)ⁿ |G₀|).
    pub fn mu_eps(&self, eps: f64, surface: f64, volume: f64) -> Result<f64, HomogError> {
        if !(eps > 0.0) {
            return Err(HomogError::Argument(format!("period ε = {eps} must be positive")));
        }
        let a = self.a_eps(eps);
        let filled = (a / eps).powi(self.n as i32) * volume;
        if filled >= 1.0 {
            return Err(HomogError::Argument(format!(
                "holes fill fraction {filled} of the cell at ε = {eps}"
            )));
        }
        Ok(eps.powi(-(self.n as i32)) * a.powf(self.n as f64 - 1.0) * surface / (1.0 - filled))
    }

    /// Limit of β(ε)/β*(ε) scaled by |∂G₀|: zero below γ*, the finite value
    /// C₀^{n−1}|∂G₀| at γ*, divergent (None) above.
    pub fn beta0(&self, surface: f64) -> Option<f64> {
        if self.exponential {
            // β* grows faster than any power, so the ratio always vanishes.
            return Some(0.0);
        }
        let gs = self.alpha * (self.n as f64 - 1.0) - self.n as f64;
        if self.gamma < gs {
            Some(0.0)
        } else if self.gamma == gs {
            Some(self.c0.powf(self.n as f64 - 1.0) * surface)
        } else {
            None
        }
    }
}

/// Scaling constants of a law at a given period ε, with the obstacle
/// measures used by the surface quantities.
#[derive(Debug, Clone)]
pub struct HomogCoeffs {
    /// Strange-term coefficient; None for p ≥ n.
    pub a_strange: Option<f64>,
    /// Monotone-power coefficient B₀; None for p ≥ n.
    pub b0: Option<f64>,
    /// Human-readable form of Θ(s) = B₀|s|^{p−2}s.
    pub theta: String,
    pub beta_star: f64,
    pub gamma_star: Option<f64>,
    pub mu_eps: f64,
    /// Limit surface-reaction coefficient; None when divergent.
    pub beta0: Option<f64>,
    pub critical_scale: f64,
    pub critical_law: String,
    pub regime: Regime,
    pub obstacle_surface: f64,
    pub obstacle_volume: f64,
}

fn polygon_measures(shape: &StarShape) -> (f64, f64) {
    let phi = shape.radii();
    let k = phi.len();
    let mut perimeter = 0.0;
    let mut area = 0.0;
    for j in 0..k {
        let t0 = 2.0 * PI * j as f64 / k as f64;
        let t1 = 2.0 * PI * ((j + 1) % k) as f64 / k as f64;
        let a = [phi[j] * t0.cos(), phi[j] * t0.sin()];
        let jj = (j + 1) % k;
        let b = [phi[jj] * t1.cos(), phi[jj] * t1.sin()];
        perimeter += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        area += 0.5 * (a[0] * b[1] - a[1] * b[0]);
    }
    (perimeter, area.abs())
}

/// Every scaling constant of the theory at period ε.  In dimension 2 the
/// obstacle measures come from the star polygon; in higher dimension the
/// model obstacle is the unit ball.
pub fn coefficients(
    law: &ScalingLaw,
    shape: &StarShape,
    eps: f64,
) -> Result<HomogCoeffs, HomogError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(HomogError::Argument(format!("period ε = {eps} must be positive")));
    }
    let (surface, volume) = if law.n == 2 {
        polygon_measures(shape)
    } else {
        (sphere_area(law.n), sphere_area(law.n) / law.n as f64)
    };
    let nf = law.n as f64;
    let (a_strange, b0) = if law.p < nf {
        (
            Some(strange_coefficient(law.n, law.p, law.c0)?),
            Some(b_zero(law.n, law.p, law.c0)?),
        )
    } else {
        (None, None)
    };
    let theta = match b0 {
        Some(b) => format!("{b}*|s|^{}*sign(s)", law.p - 1.0),
        None => "undefined for p >= n".to_string(),
    };
    Ok(HomogCoeffs {
        a_strange,
        b0,
        theta,
        beta_star: law.beta_star(eps),
        gamma_star: law.gamma_star(),
        mu_eps: law.mu_eps(eps, surface, volume)?,
        beta0: law.beta0(surface),
        critical_scale: law.critical_scale(eps),
        critical_law: law.critical_law(),
        regime: law.regime(),
        obstacle_surface: surface,
        obstacle_volume: volume,
    })
}

/// The strange-term resolvent H: for each r, the unique solution of
/// B₀|H|^{p−2}H = σ(r−H) − shift over the maximal monotone completion of σ.
#[derive(Clone)]
pub struct StrangeTerm {
    kinetics: Arc<Kinetics>,
    pub n: u32,
    pub p: f64,
    pub c0: f64,
    pub b0: f64,
    shift: f64,
}

pub fn strange_term(kinetics: Kinetics, n: u32, p: f64, c0: f64) -> Result<StrangeTerm, HomogError> {
    kinetics.validate()?;
    let b0 = b_zero(n, p, c0)?;
    Ok(StrangeTerm { kinetics: Arc::new(kinetics), n, p, c0, b0, shift: 0.0 })
}

impl StrangeTerm {
    fn theta(&self, h: f64) -> f64 {
        self.b0 * signed_pow(h, self.p - 1.0)
    }

    fn residual(&self, h: f64, r: f64) -> f64 {
        self.theta(h) - self.kinetics.eval(r - h) + self.shift
    }

    /// H(r) by bisection of the strictly increasing residual; vertical
    /// segments of the kinetics graph are resolved by the inclusion test
    /// Θ(H) + shift ∈ [σ(ℓ⁻), σ(ℓ⁺)] at each jump location ℓ.
    pub fn evaluate(&self, r: f64) -> Result<f64, HomogError> {
        for j in self.kinetics.jumps() {
            let h = r - j.location;
            let v = self.theta(h) + self.shift;
            let lo_ok = !j.lower.is_finite() || v >= j.lower - JUMP_TOL;
            let hi_ok = !j.upper.is_finite() || v <= j.upper + JUMP_TOL;
            if lo_ok && hi_ok {
                return Ok(h);
            }
        }
        let (mut lo, mut hi) = (r.min(0.0), r.max(0.0));
        let mut step = 1.0_f64.max(r.abs());
        let mut grown = 0;
        while self.residual(lo, r) > 0.0 {
            lo -= step;
            step *= 2.0;
            grown += 1;
            if grown > 60 {
                return Err(HomogError::Kinetics(format!(
                    "no lower bracket for H at r = {r}; kinetics not monotone?"
                )));
            }
        }
        step = 1.0_f64.max(r.abs());
        grown = 0;
        while self.residual(hi, r) < 0.0 {
            hi += step;
            step *= 2.0;
            grown += 1;
            if grown > 60 {
                return Err(HomogError::Kinetics(format!(
                    "no upper bracket for H at r = {r}; kinetics not monotone?"
                )));
            }
        }
        while hi - lo > BISECT_TOL {
            let mid = 0.5 * (lo + hi);
            if self.residual(mid, r) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// The limit volume reaction r ↦ |H(r)|^{p−2}H(r).
    pub fn reaction(&self) -> Arc<dyn Reaction> {
        Arc::new(StrangePower { term: self.clone() })
    }
}

struct StrangePower {
    term: StrangeTerm,
}

impl StrangePower {
    fn h(&self, s: f64) -> f64 {
        // kinetics validated at construction: the increasing residual always
        // brackets, so evaluation cannot fail
        self.term.evaluate(s).expect("strange term bracket")
    }
}

impl Reaction for StrangePower {
    fn eval(&self, s: f64) -> f64 {
        signed_pow(self.h(s), self.term.p - 1.0)
    }

    fn deriv(&self, s: f64) -> Option<f64> {
        let h = 1e-6;
        let d = (self.eval(s + h) - self.eval(s - h)) / (2.0 * h);
        Some(d.max(0.0))
    }

    fn single_valued(&self) -> bool {
        true
    }

    fn lipschitz_near_zero(&self) -> bool {
        // |H(s)| ≤ |s|, so the power is the only possible degeneracy
        self.term.p >= 2.0
    }
}

/// What h(w) of the critical effectiveness comparison evaluates through:
/// Φ_p(h(w)) = σ̂(1) − Φ_p(H(1−w)) with H the shifted strange term of
/// B₀Φ_p(H) = σ̂(s−H) − σ̂(1).
pub struct CriticalReaction {
    term: StrangeTerm,
    pub sigma_one: f64,
}

pub fn critical_reaction(
    kinetics: Kinetics,
    n: u32,
    p: f64,
    c0: f64,
) -> Result<CriticalReaction, HomogError> {
    let mut term = strange_term(kinetics, n, p, c0)?;
    let sigma_one = term.kinetics.eval(1.0);
    term.shift = sigma_one;
    Ok(CriticalReaction { term, sigma_one })
}

impl CriticalReaction {
    pub fn h(&self, w: f64) -> Result<f64, HomogError> {
        let hh = self.term.evaluate(1.0 - w)?;
        let rhs = self.sigma_one - signed_pow(hh, self.term.p - 1.0);
        Ok(signed_pow(rhs, 1.0 / (self.term.p - 1.0)))
    }

    /// Volume reaction of the critical limit written without its source:
    /// w ↦ Φ_p(h(w)) − σ̂(1) = −Φ_p(H(1−w)), vanishing at w = 0.
    pub fn reaction(&self) -> Arc<dyn Reaction> {
        Arc::new(CriticalPower { term: self.term.clone() })
    }
}

struct CriticalPower {
    term: StrangeTerm,
}

impl Reaction for CriticalPower {
    fn eval(&self, s: f64) -> f64 {
        let hh = self.term.evaluate(1.0 - s).expect("strange term bracket");
        -signed_pow(hh, self.term.p - 1.0)
    }

    fn deriv(&self, s: f64) -> Option<f64> {
        let h = 1e-6;
        let d = (self.eval(s + h) - self.eval(s - h)) / (2.0 * h);
        Some(d.max(0.0))
    }

    fn lipschitz_near_zero(&self) -> bool {
        self.term.p >= 2.0
    }
}

struct ExteriorCoupling {
    kinetics: Arc<Kinetics>,
    u: f64,
}

impl Reaction for ExteriorCoupling {
    fn eval(&self, w: f64) -> f64 {
        -self.kinetics.eval(self.u - w)
    }

    fn deriv(&self, w: f64) -> Option<f64> {
        self.kinetics.deriv(self.u - w)
    }
}

/// Radial exterior problem on [1, R]: Δŵ = 0 outside the unit ball with
/// −ŵ′(1) = C₀σ(u − ŵ(1)) and a decay-matched far condition.  Returns the
/// profile and the boundary flux density C₀σ(u − ŵ(1)), which equals
/// (n−2)·ℋ(u); at n = 3 this is the strange-term H itself, giving an
/// oracle computed through the solver instead of the algebra.
pub fn exterior_radial_h(
    kinetics: Kinetics,
    n: u32,
    c0: f64,
    u: f64,
    r_trunc: f64,
    n_grid: usize,
) -> Result<(RadialProfile, f64), HomogError> {
    if n < 3 {
        return Err(HomogError::Argument(format!(
            "exterior reduction needs n ≥ 3 for a decaying tail, got n = {n}"
        )));
    }
    if !(c0 > 0.0) {
        return Err(HomogError::Argument(format!("C₀ = {c0} must be positive")));
    }
    if !(r_trunc >= 50.0) {
        return Err(HomogError::Argument(format!(
            "truncation radius {r_trunc} too small to bury the tail"
        )));
    }
    if n_grid < 16 {
        return Err(HomogError::Argument(format!("grid of {n_grid} points is too coarse")));
    }
    kinetics.validate()?;
    if !kinetics.jumps().is_empty() {
        return Err(HomogError::Kinetics(
            "exterior oracle requires continuous kinetics".to_string(),
        ));
    }
    let kinetics = Arc::new(kinetics);
    let spec = RadialSpec {
        n,
        p: 2.0,
        r0: 1.0,
        r1: r_trunc,
        n_points: n_grid,
        volume_reaction: None,
        volume_source: 0.0,
        left: RadialEnd::Kinetics {
            reaction: Arc::new(ExteriorCoupling { kinetics: kinetics.clone(), u }),
            weight: c0,
            source: 0.0,
        },
        right: RadialEnd::DecayMatched,
    };
    let profile = solve_radial(&spec)?;
    let hval = c0 * kinetics.eval(u - profile.values[0]);
    Ok((profile, hval))
}

/// Periodic cell solutions with the effective diffusion matrix.
pub struct CellSolution {
    pub chi: [GridFunction; 2],
    pub q: [[f64; 2]; 2],
    /// Scalar effective diffusion when q is isotropic to 1e−8.
    pub alpha: Option<f64>,
    /// |∂T| / (α(T)·|Y∖T|) when α is defined.
    pub lambda: Option<f64>,
    pub hole_perimeter: f64,
    pub material_area: f64,
}

/// Solves the two periodic cell problems −Δχ_j = 0, ∂(χ_j + y_j)/∂ν = 0 on
/// the hole boundary, and assembles q_ij = δ_ij + (1/|Y∖T|)∫∂χ_j/∂y_i.
/// Periodic sides are identified by wrapped node coordinates; the singular
/// constant is removed by pinning one node and subtracting the mean.
pub fn cell_effective_matrix(cell: &TriMesh) -> Result<CellSolution, HomogError> {
    let nodes = cell.nodes();
    let nv = nodes.len();
    let (mut xmin, mut xmax, mut ymin, mut ymax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in nodes {
        xmin = xmin.min(p[0]);
        xmax = xmax.max(p[0]);
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    let tol = 1e-9;
    let quant = |x: f64, y: f64| ((x / tol).round() as i64, (y / tol).round() as i64);
    let on_max = |p: [f64; 2]| (xmax - p[0]).abs() <= tol || (ymax - p[1]).abs() <= tol;

    let mut key_to_node: HashMap<(i64, i64), usize> = HashMap::new();
    for (i, p) in nodes.iter().enumerate() {
        if !on_max(*p) && key_to_node.insert(quant(p[0], p[1]), i).is_some() {
            return Err(HomogError::Mesh(MeshError::Mesh(format!(
                "coincident nodes near ({}, {})",
                p[0], p[1]
            ))));
        }
    }
    let mut rep = vec![usize::MAX; nv];
    for (i, p) in nodes.iter().enumerate() {
        if !on_max(*p) {
            rep[i] = i;
            continue;
        }
        let wx = if (xmax - p[0]).abs() <= tol { xmin } else { p[0] };
        let wy = if (ymax - p[1]).abs() <= tol { ymin } else { p[1] };
        rep[i] = *key_to_node.get(&quant(wx, wy)).ok_or_else(|| {
            HomogError::Mesh(MeshError::Mesh(format!(
                "periodic identification failed at ({}, {})",
                p[0], p[1]
            )))
        })?;
    }
    let mut dof = vec![usize::MAX; nv];
    let mut n_dof = 0;
    for i in 0..nv {
        if rep[i] == i {
            dof[i] = n_dof;
            n_dof += 1;
        }
    }
    for i in 0..nv {
        dof[i] = dof[rep[i]];
    }

    // edge → opposite vertex, for orienting boundary normals
    let mut opposite: HashMap<(usize, usize), usize> = HashMap::new();
    for tri in cell.tris() {
        for (a, b, c) in [(tri[0], tri[1], tri[2]), (tri[1], tri[2], tri[0]), (tri[2], tri[0], tri[1])]
        {
            opposite.insert((a.min(b), a.max(b)), c);
        }
    }

    let pin = 0usize;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(9 * cell.tris().len());
    for t in 0..cell.tris().len() {
        let tri = cell.tris()[t];
        let grads = basis_gradients(cell, t);
        let area = cell.areas()[t];
        for a in 0..3 {
            for b in 0..3 {
                let (i, j) = (dof[tri[a]], dof[tri[b]]);
                if i == pin || j == pin {
                    continue;
                }
                triplets.push((i, j, area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1])));
            }
        }
    }
    triplets.push((pin, pin, 1.0));
    let k = Csr::from_triplets(n_dof, &triplets);

    let mut hole_perimeter = 0.0;
    let mut rhs = [vec![0.0; n_dof], vec![0.0; n_dof]];
    for &(i, j, tag) in cell.boundary_edges() {
        if tag != BoundaryTag::Particle {
            continue;
        }
        let (a, b) = (nodes[i], nodes[j]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        hole_perimeter += len;
        let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        let third = nodes[opposite[&(i.min(j), i.max(j))]];
        let mut nu = [(b[1] - a[1]) / len, (a[0] - b[0]) / len];
        if nu[0] * (third[0] - mid[0]) + nu[1] * (third[1] - mid[1]) > 0.0 {
            nu = [-nu[0], -nu[1]];
        }
        for comp in 0..2 {
            for &node in &[i, j] {
                if dof[node] != pin {
                    rhs[comp][dof[node]] -= 0.5 * len * nu[comp];
                }
            }
        }
    }

    let area_total = cell.total_area();
    let measures = cell.node_measures();
    let mut chi = Vec::with_capacity(2);
    let mut q = [[0.0; 2]; 2];
    for (j, b) in rhs.iter().enumerate() {
        let x = cg_jacobi(&k, b, 1e-12, 20_000)
            .map_err(|e| HomogError::Pde(PdeError::Solver(e)))?;
        let mut values: Vec<f64> = (0..nv).map(|i| x[dof[i]]).collect();
        let mean: f64 =
            values.iter().zip(measures).map(|(v, m)| v * m).sum::<f64>() / area_total;
        for v in &mut values {
            *v -= mean;
        }
        for (i, row) in q.iter_mut().enumerate() {
            row[j] = if i == j { 1.0 } else { 0.0 };
        }
        for t in 0..cell.tris().len() {
            let g = tri_gradient(cell, &values, t);
            let w = cell.areas()[t] / area_total;
            q[0][j] += w * g[0];
            q[1][j] += w * g[1];
        }
        chi.push(GridFunction::from_values(values));
    }
    let chi = match <[GridFunction; 2]>::try_from(chi) {
        Ok(c) => c,
        Err(_) => unreachable!("two cell problems solved"),
    };

    let isotropic = q[0][1].abs() <= 1e-8 && q[1][0].abs() <= 1e-8 && (q[0][0] - q[1][1]).abs() <= 1e-8;
    let alpha = isotropic.then(|| 0.5 * (q[0][0] + q[1][1]));
    let lambda = alpha.map(|a| hole_perimeter / (a * area_total));
    Ok(CellSolution { chi, q, alpha, lambda, hole_perimeter, material_area: area_total })
}

/// Radial capacity corrector of the critical scale: 1 on the hole, 0 from
/// a quarter-period out, the explicit p-harmonic profile between.
pub struct CorrectorW {
    pub eps: f64,
    pub a_eps: f64,
    pub n: u32,
    pub p: f64,
    kappa: f64,
    denom: f64,
}

pub fn corrector_w(law: &ScalingLaw, eps: f64) -> Result<CorrectorW, HomogError> {
    let nf = law.n as f64;
    if law.p >= nf {
        return Err(HomogError::Argument(format!(
            "corrector profile needs p < n, got p = {}, n = {}",
            law.p, law.n
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(HomogError::Argument(format!("period ε = {eps} must be positive")));
    }
    let a = law.a_eps(eps);
    if a >= eps / 4.0 {
        return Err(HomogError::Argument(format!(
            "hole radius {a} reaches the support radius {} at ε = {eps}",
            eps / 4.0
        )));
    }
    let kappa = (nf - law.p) / (law.p - 1.0);
    let denom = a.powf(-kappa) - (eps / 4.0).powf(-kappa);
    Ok(CorrectorW { eps, a_eps: a, n: law.n, p: law.p, kappa, denom })
}

impl CorrectorW {
    pub fn evaluate(&self, r: f64) -> f64 {
        if r <= self.a_eps {
            1.0
        } else if r >= self.eps / 4.0 {
            0.0
        } else {
            (r.powf(-self.kappa) - (self.eps / 4.0).powf(-self.kappa)) / self.denom
        }
    }

    /// ε^{−n} ∫ |∇w|^q over the annulus, by 10⁴-point log-spaced midpoint
    /// quadrature of |S^{n−1}| |w′(r)|^q r^{n−1}.
    pub fn seminorm_q(&self, q: f64) -> f64 {
        let m = 10_000;
        let (la, lb) = (self.a_eps.ln(), (self.eps / 4.0).ln());
        let dl = (lb - la) / m as f64;
        let mut acc = 0.0;
        for i in 0..m {
            let r = (la + (i as f64 + 0.5) * dl).exp();
            let slope = self.kappa * r.powf(-self.kappa - 1.0) / self.denom;
            acc += slope.powf(q) * r.powf(self.n as f64 - 1.0) * r * dl;
        }
        acc * sphere_area(self.n) * self.eps.powi(-(self.n as i32))
    }
}

/// Limit problem selector for `solve_homogenized`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitModel {
    Big,
    Subcritical,
    CriticalBall,
}

fn add_constant(src: &Source, c: f64) -> Source {
    match src {
        Source::Constant(a) => Source::Constant(a + c),
        Source::Field(v) => Source::Field(v.iter().map(|x| x + c).collect()),
    }
}

/// Solves the homogenized limit of the perforated problem described by
/// `seed` (whose boundary kinetics live on the vanished hole boundaries):
/// big holes keep the cell diffusion matrix and move the surface reaction
/// into the volume with weight |∂T|/|Y∖T|; subcritical holes keep identity
/// diffusion with weight β₀; the critical ball case absorbs the reaction
/// into the strange term.
pub fn solve_homogenized(
    mesh: &TriMesh,
    model: LimitModel,
    seed: &EllipticSpec,
    coeffs: &HomogCoeffs,
    cell: Option<&CellSolution>,
    strange: Option<&StrangeTerm>,
) -> Result<GridFunction, HomogError> {
    let mut spec = seed.clone();
    spec.boundary_kinetics = None;
    spec.boundary_source = 0.0;
    match model {
        LimitModel::Big => {
            let cell = cell.ok_or_else(|| {
                HomogError::Argument("big-hole limit needs a cell solution".to_string())
            })?;
            // q is symmetric up to quadrature noise; the solver wants it exact
            let off = 0.5 * (cell.q[0][1] + cell.q[1][0]);
            spec.diffusion = [[cell.q[0][0], off], [off, cell.q[1][1]]];
            let weight = cell.hole_perimeter / cell.material_area;
            if let Some((sigma, _)) = &seed.boundary_kinetics {
                spec.volume_kinetics = Some((sigma.clone(), weight));
            }
            spec.volume_source = add_constant(&spec.volume_source, weight * seed.boundary_source);
        }
        LimitModel::Subcritical => {
            let b0 = coeffs.beta0.ok_or_else(|| {
                HomogError::Argument(
                    "subcritical limit needs a finite β₀ (reaction law above γ*)".to_string(),
                )
            })?;
            if let Some((sigma, _)) = &seed.boundary_kinetics {
                spec.volume_kinetics = Some((sigma.clone(), b0));
            }
            spec.volume_source = add_constant(&spec.volume_source, b0 * seed.boundary_source);
        }
        LimitModel::CriticalBall => {
            let strange = strange.ok_or_else(|| {
                HomogError::Argument("critical limit needs a strange term".to_string())
            })?;
            let a = coeffs.a_strange.ok_or_else(|| {
                HomogError::Argument("critical limit needs the capacity coefficient".to_string())
            })?;
            spec.volume_kinetics = Some((strange.reaction(), a));
        }
    }
    Ok(solve_semilinear(mesh, &spec)?.u)
}

/// "r,H" table of a strange term.
pub fn strange_csv(term: &StrangeTerm, rs: &[f64]) -> Result<String, HomogError> {
    let mut out = String::from("r,H\n");
    for &r in rs {
        let h = term.evaluate(r)?;
        let _ = writeln!(out, "{:.16e},{:.16e}", r, h);
    }
    Ok(out)
}

/// "case,q11,q12,q22,alpha,lambda" rows for a family of cell solutions.
pub fn cell_csv(cases: &[(String, CellSolution)]) -> String {
    let mut out = String::from("case,q11,q12,q22,alpha,lambda\n");
    for (name, sol) in cases {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            name,
            sol.q[0][0],
            sol.q[0][1],
            sol.q[1][1],
            sol.alpha.unwrap_or(f64::NAN),
            sol.lambda.unwrap_or(f64::NAN),
        );
    }
    out
}

/// "eps,seminorm_q" scaling table of the corrector gradient.
pub fn corrector_csv(law: &ScalingLaw, q: f64, epsilons: &[f64]) -> Result<String, HomogError> {
    let mut out = String::from("eps,seminorm_q\n");
    for &eps in epsilons {
        let w = corrector_w(law, eps)?;
        let _ = writeln!(out, "{:.16e},{:.16e}", eps, w.seminorm_q(q));
    }
    Ok(out)
}
