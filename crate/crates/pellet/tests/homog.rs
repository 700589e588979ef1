use std::f64::consts::PI;

use pellet::homog::{
    b_zero, cell_csv, cell_effective_matrix, coefficients, corrector_csv, corrector_w,
    critical_reaction, exterior_radial_h, solve_homogenized, sphere_area, strange_coefficient,
    strange_csv, strange_term, HomogError, LimitModel, Regime, ScalingLaw,
};
use pellet::mesh::{build_cell_mesh, build_plain_mesh, BoundaryTag, PlainDomain, StarShape, TriMesh};
use pellet::pde::{solve_semilinear, EllipticSpec, Kinetics, Source};
use proptest::prelude::*;

const GOLDEN: f64 = 0.618033988749894848; // (√5 − 1)/2

fn disk_cell(radius: f64, nt: usize, nr: usize) -> TriMesh {
    let shape = StarShape::disk(nt).unwrap();
    build_cell_mesh(&shape, radius, nt, nr).unwrap()
}

fn periodic_rect(resolution: usize) -> TriMesh {
    build_plain_mesh(PlainDomain::Rect { w: 1.0, h: 1.0 }, resolution)
        .unwrap()
        .with_retagged_edges(|_, _, _| BoundaryTag::Outer)
        .unwrap()
}

#[test]
fn sphere_areas_match_closed_forms() {
    assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-15);
    assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-14);
    assert!((sphere_area(4) - 2.0 * PI * PI).abs() < 1e-13);
    assert!((sphere_area(5) - 8.0 * PI * PI / 3.0).abs() < 1e-13);
}

#[test]
fn reference_constants_at_unit_scale() {
    assert!((b_zero(3, 2.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
    let a = strange_coefficient(3, 2.0, 1.0).unwrap();
    assert!((a - 4.0 * PI).abs() < 1e-12 * 4.0 * PI);
}

#[test]
fn constants_reject_leading_order_exponents() {
    assert!(strange_coefficient(3, 3.0, 1.0).is_err());
    assert!(strange_coefficient(3, 3.5, 1.0).is_err());
    assert!(b_zero(2, 2.0, 1.0).is_err());
    assert!(b_zero(3, 1.0, 1.0).is_err());
    assert!(b_zero(3, 2.0, 0.0).is_err());
}

#[test]
fn beta_star_and_mu_by_substitution() {
    // a(0.1) = 0.01 under α = 2, so β* = 0.01⁻² · 0.1³ = 10
    let law = ScalingLaw::power(3, 2.0, 1.0, 2.0, 0.0).unwrap();
    assert!((law.beta_star(0.1) - 10.0).abs() < 1e-12);

    // half-radius disk in the unit cell: μ = (1/2)·2π / (1 − π/4)
    let law = ScalingLaw::power(2, 1.5, 0.5, 1.0, 0.0).unwrap();
    let shape = StarShape::disk(512).unwrap();
    let c = coefficients(&law, &shape, 1.0).unwrap();
    let exact = PI / (1.0 - PI / 4.0);
    assert!(
        (c.mu_eps - exact).abs() < 5e-4 * exact,
        "μ = {} vs {} beyond the polygon error",
        c.mu_eps,
        exact
    );
    assert!(c.mu_eps > 0.0 && c.beta_star > 0.0 && c.critical_scale > 0.0);
}

#[test]
fn mu_rejects_overfilled_cell() {
    let law = ScalingLaw::power(2, 1.5, 1.0, 1.0, 0.0).unwrap();
    // a = ε: the scaled disk covers more than the whole cell
    assert!(law.mu_eps(1.0, 2.0 * PI, PI).is_err());
}

#[test]
fn beta0_follows_the_gamma_threshold() {
    // γ* = α(n−1) − n = 1 for n = 3, α = 2
    let surface = sphere_area(3);
    let below = ScalingLaw::power(3, 2.0, 2.0, 2.0, 0.5).unwrap();
    assert_eq!(below.beta0(surface), Some(0.0));
    let at = ScalingLaw::power(3, 2.0, 2.0, 2.0, 1.0).unwrap();
    let b0 = at.beta0(surface).unwrap();
    assert!((b0 - 4.0 * surface).abs() < 1e-12 * b0, "C₀² |∂G₀| expected, got {b0}");
    let above = ScalingLaw::power(3, 2.0, 2.0, 2.0, 1.5).unwrap();
    assert_eq!(above.beta0(surface), None);
    assert_eq!(at.gamma_star(), Some(1.0));
}

#[test]
fn regime_grid_matches_theory() {
    use Regime::*;
    let cases: [(u32, f64, f64, Regime); 19] = [
        (3, 2.0, 1.0, Big),
        (3, 2.0, 2.0, Subcritical),
        (3, 2.0, 3.0, Critical),
        (3, 2.0, 3.5, Supercritical),
        (3, 2.0, 4.0, Supercritical),
        (4, 2.0, 1.0, Big),
        (4, 2.0, 1.5, Subcritical),
        (4, 2.0, 2.0, Critical),
        (4, 2.0, 5.0, Supercritical),
        (4, 3.0, 3.0, Subcritical),
        (4, 3.0, 4.0, Critical),
        (4, 3.0, 6.0, Supercritical),
        (2, 1.5, 3.0, Subcritical),
        (2, 1.5, 4.0, Critical),
        (2, 1.5, 5.0, Supercritical),
        (3, 3.0, 2.0, Subcritical),
        (3, 3.0, 17.0, Subcritical),
        (3, 4.0, 2.0, Subcritical),
        (2, 2.0, 1.0, Big),
    ];
    for (n, p, alpha, want) in cases {
        let law = ScalingLaw::power(n, p, 1.0, alpha, 0.0).unwrap();
        assert_eq!(law.regime(), want, "({n}, {p}, {alpha})");
    }
    let exotic = ScalingLaw::exponential(3, 0.0).unwrap();
    assert_eq!(exotic.regime(), Regime::Critical);
}

#[test]
fn exponential_law_sits_below_every_power() {
    let law = ScalingLaw::exponential(3, 0.0).unwrap();
    assert!(law.is_exponential());
    assert!(law.critical_law().contains("exp"));
    let eps = 0.05;
    assert!(law.a_eps(eps) < eps.powi(25));
    assert!(law.a_eps(eps) > 0.0);
    assert_eq!(law.gamma_star(), None);
    assert_eq!(law.beta0(4.0 * PI), Some(0.0));
}

#[test]
fn scaling_law_rejects_bad_parameters() {
    assert!(ScalingLaw::power(1, 2.0, 1.0, 1.0, 0.0).is_err());
    assert!(ScalingLaw::power(3, 1.0, 1.0, 1.0, 0.0).is_err());
    assert!(ScalingLaw::power(3, 2.0, -1.0, 1.0, 0.0).is_err());
    assert!(ScalingLaw::power(3, 2.0, 1.0, 0.5, 0.0).is_err());
    assert!(ScalingLaw::power(3, 2.0, 1.0, 1.0, f64::INFINITY).is_err());
}

#[test]
fn strange_term_of_zero_kinetics_vanishes() {
    let term = strange_term(Kinetics::linear(0.0).unwrap(), 3, 2.0, 1.0).unwrap();
    for r in [-3.0, -0.4, 0.0, 0.7, 5.0] {
        assert!(term.evaluate(r).unwrap().abs() <= 1e-12);
    }
}

#[test]
fn strange_term_linear_closed_form() {
    // B₀ H = a(r − H)  ⟹  H = a r / (B₀ + a)
    for c0 in [0.5, 1.0, 2.0] {
        for a in [0.5, 1.0, 2.0] {
            let b0 = b_zero(3, 2.0, c0).unwrap();
            let term = strange_term(Kinetics::linear(a).unwrap(), 3, 2.0, c0).unwrap();
            for r in [-2.0, -0.3, 0.0, 0.6, 1.0, 4.0] {
                let want = a * r / (b0 + a);
                let got = term.evaluate(r).unwrap();
                assert!(
                    (got - want).abs() <= 1e-12,
                    "C₀={c0}, a={a}, r={r}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn strange_term_heaviside_clamps() {
    let term = strange_term(Kinetics::heaviside(), 3, 2.0, 1.0).unwrap();
    for r in [-2.0f64, -0.5, 0.0, 0.3, 0.7, 0.99, 1.0, 1.5, 2.5] {
        let want = r.clamp(0.0, 1.0);
        assert!(
            (term.evaluate(r).unwrap() - want).abs() <= 1e-10,
            "H({r}) should clamp to {want}"
        );
    }
}

#[test]
fn strange_term_golden_section() {
    // H² + H − 1 = 0 at r = 1 for the square-root law
    let term = strange_term(Kinetics::power(1.0, 0.5).unwrap(), 3, 2.0, 1.0).unwrap();
    assert!((term.evaluate(1.0).unwrap() - GOLDEN).abs() <= 1e-10);
}

#[test]
fn strange_term_signorini_resolvent() {
    let term =
        strange_term(Kinetics::signorini(Kinetics::linear(1.0).unwrap()), 3, 2.0, 1.0).unwrap();
    // the vertical segment of the unilateral graph carries H(r) = r below zero
    for r in [-3.0, -0.7, -1e-6] {
        assert!((term.evaluate(r).unwrap() - r).abs() <= 1e-12);
    }
    for r in [0.4, 1.0, 2.0] {
        assert!((term.evaluate(r).unwrap() - r / 2.0).abs() <= 1e-12);
    }
}

fn kinetics_catalog() -> Vec<(&'static str, Kinetics)> {
    vec![
        ("linear", Kinetics::linear(1.0).unwrap()),
        ("steep linear", Kinetics::linear(2.5).unwrap()),
        ("square root", Kinetics::power(1.0, 0.5).unwrap()),
        ("heaviside", Kinetics::heaviside()),
        ("signorini", Kinetics::signorini(Kinetics::power(1.5, 0.7).unwrap())),
    ]
}

#[test]
fn strange_term_is_monotone_and_nonexpansive() {
    for (name, k) in kinetics_catalog() {
        let term = strange_term(k, 3, 2.0, 1.0).unwrap();
        assert!(term.evaluate(0.0).unwrap().abs() <= 1e-12, "{name}: H(0) ≠ 0");
        let mut prev_r = -4.0;
        let mut prev_h = term.evaluate(prev_r).unwrap();
        for i in 1..1000 {
            let r = -4.0 + 10.0 * i as f64 / 999.0;
            let h = term.evaluate(r).unwrap();
            let dh = h - prev_h;
            assert!(dh >= -2e-12, "{name}: H decreases near r = {r}");
            assert!(dh <= (r - prev_r) + 2e-12, "{name}: H expands near r = {r}");
            prev_r = r;
            prev_h = h;
        }
    }
}

#[test]
fn exterior_oracle_matches_strange_term() {
    // steep but continuous stand-in for the step graph
    let smoothed = Kinetics::table(vec![(-5.0, 0.0), (0.0, 0.0), (0.01, 1.0), (6.0, 1.0)]).unwrap();
    let catalog = vec![
        Kinetics::linear(1.0).unwrap(),
        Kinetics::power(1.0, 0.5).unwrap(),
        smoothed,
    ];
    for k in catalog {
        for c0 in [0.5, 1.0, 2.0] {
            let term = strange_term(k.clone(), 3, 2.0, c0).unwrap();
            for u in [-1.0, 0.3, 1.0, 5.0] {
                let (_, hval) = exterior_radial_h(k.clone(), 3, c0, u, 100.0, 800).unwrap();
                let alg = term.evaluate(u).unwrap();
                assert!(
                    (hval - alg).abs() <= 1e-4,
                    "C₀={c0}, u={u}: exterior {hval} vs algebraic {alg}"
                );
            }
        }
    }
}

#[test]
fn exterior_linear_half_value() {
    let (profile, hval) =
        exterior_radial_h(Kinetics::linear(1.0).unwrap(), 3, 1.0, 1.0, 100.0, 800).unwrap();
    assert!((hval - 0.5).abs() <= 1e-4);
    // ŵ = H/r decays through the truncated window
    assert!(profile.values[0] > profile.values[profile.values.len() - 1]);
}

#[test]
fn exterior_zero_kinetics_is_flat_zero() {
    let (profile, hval) =
        exterior_radial_h(Kinetics::linear(0.0).unwrap(), 3, 1.0, 1.0, 100.0, 400).unwrap();
    assert_eq!(hval, 0.0);
    for v in &profile.values {
        assert!(v.abs() <= 1e-12);
    }
}

#[test]
fn exterior_rejects_bad_inputs() {
    let lin = Kinetics::linear(1.0).unwrap();
    assert!(exterior_radial_h(lin.clone(), 2, 1.0, 1.0, 100.0, 400).is_err());
    assert!(exterior_radial_h(lin.clone(), 3, 1.0, 1.0, 10.0, 400).is_err());
    assert!(matches!(
        exterior_radial_h(Kinetics::heaviside(), 3, 1.0, 1.0, 100.0, 400),
        Err(HomogError::Kinetics(_))
    ));
}

#[test]
fn critical_reaction_linear_closed_form() {
    let cr = critical_reaction(Kinetics::linear(1.0).unwrap(), 3, 2.0, 1.0).unwrap();
    assert!((cr.sigma_one - 1.0).abs() < 1e-15);
    // H(s) = (s−1)/2, so h(w) = 1 + w/2
    for w in [0.0, 0.25, 0.5, 1.0] {
        assert!((cr.h(w).unwrap() - (1.0 + w / 2.0)).abs() <= 1e-10, "h({w})");
    }
    let r = cr.reaction();
    assert!(r.eval(0.0).abs() <= 2e-12, "critical reaction must vanish at rest");
    for w in [0.0, 0.3, 1.0] {
        assert!((r.eval(w) - w / 2.0).abs() <= 1e-10);
    }
}

#[test]
fn critical_reaction_of_zero_kinetics_vanishes() {
    let cr = critical_reaction(Kinetics::linear(0.0).unwrap(), 3, 2.0, 1.0).unwrap();
    for w in [0.0, 0.5, 1.0] {
        assert!(cr.h(w).unwrap().abs() <= 1e-12);
        assert!(cr.reaction().eval(w).abs() <= 1e-12);
    }
}

#[test]
fn critical_reaction_monotone_for_root_kinetics() {
    let cr = critical_reaction(Kinetics::power(1.0, 0.5).unwrap(), 3, 2.0, 1.0).unwrap();
    let mut prev_h = cr.h(0.0).unwrap();
    let mut prev_r = cr.reaction().eval(0.0);
    for i in 1..1000 {
        let w = i as f64 / 999.0;
        let h = cr.h(w).unwrap();
        let r = cr.reaction().eval(w);
        assert!(h >= prev_h - 2e-12, "h decreases near w = {w}");
        assert!(r >= prev_r - 2e-12, "reaction decreases near w = {w}");
        prev_h = h;
        prev_r = r;
    }
}

#[test]
fn empty_cell_has_identity_matrix() {
    let sol = cell_effective_matrix(&periodic_rect(8)).unwrap();
    assert!((sol.q[0][0] - 1.0).abs() <= 1e-14);
    assert!((sol.q[1][1] - 1.0).abs() <= 1e-14);
    assert!(sol.q[0][1].abs() <= 1e-14 && sol.q[1][0].abs() <= 1e-14);
    assert_eq!(sol.hole_perimeter, 0.0);
    assert_eq!(sol.alpha, Some(1.0));
}

#[test]
fn disk_cell_matrix_is_isotropic_spd() {
    let sol = cell_effective_matrix(&disk_cell(0.25, 64, 24)).unwrap();
    assert!(sol.q[0][1].abs() <= 1e-8 && sol.q[1][0].abs() <= 1e-8);
    assert!((sol.q[0][0] - sol.q[1][1]).abs() <= 1e-8);
    assert!((sol.q[0][1] - sol.q[1][0]).abs() <= 1e-10);
    let (a, lam) = (sol.alpha.unwrap(), sol.lambda.unwrap());
    assert!(a > 0.0 && a < 1.0, "effective diffusion {a} outside (0, 1)");
    let det = sol.q[0][0] * sol.q[1][1] - sol.q[0][1] * sol.q[1][0];
    assert!(det > 0.0 && sol.q[0][0] > 0.0, "q must be SPD");
    assert!((lam - sol.hole_perimeter / (a * sol.material_area)).abs() <= 1e-12);
}

#[test]
fn disk_cell_alpha_converges_to_frozen_reference() {
    // Richardson extrapolation of the two finest of (32, 64, 128) rays
    const ALPHA_REF: f64 = 0.8357228232;
    let a32 = cell_effective_matrix(&disk_cell(0.25, 32, 12)).unwrap().alpha.unwrap();
    let a64 = cell_effective_matrix(&disk_cell(0.25, 64, 24)).unwrap().alpha.unwrap();
    let a128 = cell_effective_matrix(&disk_cell(0.25, 128, 48)).unwrap().alpha.unwrap();
    assert!(a32 > a64 && a64 > a128, "refinement should tighten from above");
    let ratio = (a32 - a64) / (a64 - a128);
    assert!((3.0..5.0).contains(&ratio), "second-order refinement broken: ratio {ratio}");
    assert!(
        (a128 - ALPHA_REF).abs() <= 5e-4,
        "α = {a128} drifted from the extrapolated reference"
    );
}

#[test]
fn cell_alpha_decreases_and_lambda_grows_with_hole_radius() {
    let mut prev_alpha = f64::INFINITY;
    let mut prev_lambda = 0.0;
    for radius in [0.15, 0.25, 0.35] {
        let sol = cell_effective_matrix(&disk_cell(radius, 32, 12)).unwrap();
        let (a, lam) = (sol.alpha.unwrap(), sol.lambda.unwrap());
        assert!(a < prev_alpha, "α should fall as the hole grows");
        assert!(lam > prev_lambda, "λ should grow with the hole");
        prev_alpha = a;
        prev_lambda = lam;
    }
}

#[test]
fn corrector_boundary_values_and_formula() {
    let law = ScalingLaw::power(3, 2.0, 1.0, 3.0, 0.0).unwrap();
    let w = corrector_w(&law, 0.125).unwrap();
    assert_eq!(w.evaluate(w.a_eps), 1.0);
    assert_eq!(w.evaluate(0.125 / 4.0), 0.0);
    let rim = 0.125 / 4.0;
    let mid = (w.a_eps * rim).sqrt();
    let exact = (mid.recip() - rim.recip()) / (w.a_eps.recip() - rim.recip());
    assert!((w.evaluate(mid) - exact).abs() <= 1e-14);
    let mut prev = 1.0 + 1e-15;
    for i in 0..200 {
        let r = w.a_eps + (rim - w.a_eps) * i as f64 / 199.0;
        let v = w.evaluate(r);
        assert!(v <= prev, "profile must fall monotonically");
        prev = v;
    }
}

#[test]
fn corrector_rejects_oversized_holes() {
    let touching = ScalingLaw::power(3, 2.0, 1.0, 1.0, 0.0).unwrap();
    assert!(corrector_w(&touching, 0.125).is_err());
    let flat = ScalingLaw::power(3, 3.0, 1.0, 2.0, 0.0).unwrap();
    assert!(corrector_w(&flat, 0.125).is_err());
}

#[test]
fn corrector_capacity_recovers_strange_coefficient() {
    // at q = p the scaled gradient energy converges to the capacity constant
    let a4pi = strange_coefficient(3, 2.0, 1.0).unwrap();
    let law = ScalingLaw::power(3, 2.0, 1.0, 3.0, 0.0).unwrap();
    let mut prev_gap = f64::INFINITY;
    for k in [5, 6, 7] {
        let eps = 2f64.powi(-k);
        let s = corrector_w(&law, eps).unwrap().seminorm_q(2.0);
        let gap = (s - a4pi).abs() / a4pi;
        assert!(gap < prev_gap, "capacity gap should shrink with ε");
        prev_gap = gap;
    }
    assert!(prev_gap <= 1e-3, "gap {prev_gap} at ε = 2⁻⁷");
}

#[test]
fn corrector_gradient_scaling_follows_the_two_exponent_law() {
    // ∫|∇W|^q splits into a hole-layer part scaling like ε^{n(p−q)/(n−p)} and
    // an outer-rim part scaling like ε^{q/(p−1)}; the smaller exponent wins.
    let law = ScalingLaw::power(3, 2.0, 1.0, 3.0, 0.0).unwrap();

    // q = 1: rim-dominated, S ≈ π ε exactly at leading order
    for k in [5, 6] {
        let eps = 2f64.powi(-k);
        let s = corrector_w(&law, eps).unwrap().seminorm_q(1.0);
        assert!((s / (PI * eps) - 1.0).abs() <= 1e-3, "S₁({eps}) = {s}");
    }

    // q = 1.5: the exponents tie at 3/2 and a logarithm appears
    for k in [6, 7] {
        let eps = 2f64.powi(-k);
        let s = corrector_w(&law, eps).unwrap().seminorm_q(1.5);
        let closed = 4.0 * PI * eps.powf(1.5) * (2.0 * (1.0 / eps).ln() - 4f64.ln());
        assert!(
            (s / closed - 1.0).abs() <= 1e-2,
            "S₁.₅({eps}) = {s} vs log-corrected {closed}"
        );
    }

    // The pure-power fit never reaches 3/2 on reachable grids: the logarithm
    // steals ~0.4 of slope across this window.
    let mut logs = Vec::new();
    for k in 3..=7 {
        let eps = 2f64.powi(-k);
        let s = corrector_w(&law, eps).unwrap().seminorm_q(1.5);
        logs.push((eps.ln(), s.ln()));
    }
    let n = logs.len() as f64;
    let (sx, sy): (f64, f64) = logs.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    assert!(
        (1.0..1.3).contains(&slope),
        "observed slope {slope} should sit well below the naive 1.5"
    );
}

#[test]
fn homogenized_subcritical_matches_direct_assembly() {
    let mesh = build_plain_mesh(PlainDomain::Rect { w: 1.0, h: 1.0 }, 12).unwrap();
    let law = ScalingLaw::power(3, 2.0, 2.0, 2.0, 1.0).unwrap(); // γ = γ* ⟹ finite β₀
    let shape = StarShape::disk(64).unwrap();
    let coeffs = coefficients(&law, &shape, 0.1).unwrap();
    let b0 = coeffs.beta0.unwrap();
    assert!(b0 > 0.0);

    let sigma = Kinetics::linear(1.0).unwrap();
    let mut seed = EllipticSpec::laplace();
    seed.boundary_kinetics = Some((sigma.clone().arc(), 7.0)); // ε-level weight, discarded in the limit
    seed.boundary_source = 0.25;
    seed.volume_source = Source::Constant(1.0);
    let hom = solve_homogenized(&mesh, LimitModel::Subcritical, &seed, &coeffs, None, None).unwrap();

    let mut direct = EllipticSpec::laplace();
    direct.volume_kinetics = Some((sigma.arc(), b0));
    direct.volume_source = Source::Constant(1.0 + b0 * 0.25);
    let want = solve_semilinear(&mesh, &direct).unwrap().u;
    for (a, b) in hom.values().iter().zip(want.values()) {
        assert!((a - b).abs() <= 1e-14);
    }
}

#[test]
fn homogenized_critical_with_zero_kinetics_is_poisson() {
    let mesh = build_plain_mesh(PlainDomain::Disk { r: 1.0 }, 10).unwrap();
    let law = ScalingLaw::power(3, 2.0, 1.0, 3.0, 0.0).unwrap();
    let shape = StarShape::disk(64).unwrap();
    let coeffs = coefficients(&law, &shape, 0.1).unwrap();
    let term = strange_term(Kinetics::linear(0.0).unwrap(), 3, 2.0, 1.0).unwrap();

    let mut seed = EllipticSpec::laplace();
    seed.volume_source = Source::Constant(1.0);
    let hom =
        solve_homogenized(&mesh, LimitModel::CriticalBall, &seed, &coeffs, None, Some(&term))
            .unwrap();
    let plain = solve_semilinear(&mesh, &seed).unwrap().u;
    for (a, b) in hom.values().iter().zip(plain.values()) {
        assert!((a - b).abs() <= 5e-12);
    }
}

#[test]
fn homogenized_big_with_empty_obstacle_is_plain_poisson() {
    let mesh = build_plain_mesh(PlainDomain::Rect { w: 1.0, h: 1.0 }, 10).unwrap();
    let cell = cell_effective_matrix(&periodic_rect(6)).unwrap();
    let law = ScalingLaw::power(2, 1.5, 0.5, 1.0, 0.0).unwrap();
    let coeffs = coefficients(&law, &StarShape::disk(64).unwrap(), 0.25).unwrap();

    let mut seed = EllipticSpec::laplace();
    seed.boundary_kinetics = Some((Kinetics::linear(1.0).unwrap().arc(), 3.0));
    seed.boundary_source = 0.5;
    seed.volume_source = Source::Constant(1.0);
    let hom =
        solve_homogenized(&mesh, LimitModel::Big, &seed, &coeffs, Some(&cell), None).unwrap();

    // perimeter 0 wipes both the volume reaction weight and the moved source
    let mut plain = EllipticSpec::laplace();
    plain.volume_source = Source::Constant(1.0);
    let want = solve_semilinear(&mesh, &plain).unwrap().u;
    for (a, b) in hom.values().iter().zip(want.values()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn homogenized_solves_demand_their_inputs() {
    let mesh = build_plain_mesh(PlainDomain::Rect { w: 1.0, h: 1.0 }, 6).unwrap();
    let seed = EllipticSpec::laplace();
    let law_fine = ScalingLaw::power(3, 2.0, 1.0, 2.0, 5.0).unwrap(); // γ > γ*: β₀ diverges
    let coeffs = coefficients(&law_fine, &StarShape::disk(64).unwrap(), 0.1).unwrap();
    assert!(matches!(
        solve_homogenized(&mesh, LimitModel::Big, &seed, &coeffs, None, None),
        Err(HomogError::Argument(_))
    ));
    assert!(matches!(
        solve_homogenized(&mesh, LimitModel::CriticalBall, &seed, &coeffs, None, None),
        Err(HomogError::Argument(_))
    ));
    assert!(matches!(
        solve_homogenized(&mesh, LimitModel::Subcritical, &seed, &coeffs, None, None),
        Err(HomogError::Argument(_))
    ));
}

#[test]
fn csv_tables_have_stable_headers() {
    let term = strange_term(Kinetics::linear(1.0).unwrap(), 3, 2.0, 1.0).unwrap();
    let table = strange_csv(&term, &[-1.0, 0.0, 1.0]).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("r,H"));
    assert_eq!(lines.count(), 3);

    let sol = cell_effective_matrix(&periodic_rect(4)).unwrap();
    let cells = cell_csv(&[("empty".to_string(), sol)]);
    assert!(cells.starts_with("case,q11,q12,q22,alpha,lambda\n"));
    assert!(cells.lines().nth(1).unwrap().starts_with("empty,"));

    let law = ScalingLaw::power(3, 2.0, 1.0, 3.0, 0.0).unwrap();
    let corr = corrector_csv(&law, 2.0, &[0.125, 0.0625]).unwrap();
    assert!(corr.starts_with("eps,seminorm_q\n"));
    assert_eq!(corr.lines().count(), 3);
    let row = corr.lines().nth(1).unwrap();
    let field = row.split(',').nth(1).unwrap();
    assert!(field.parse::<f64>().unwrap() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn calibration_identity_links_the_constants(
        n in 3u32..7,
        t in 0.05f64..0.95,
        c0 in 0.1f64..3.0,
    ) {
        // 𝒜 = C₀^{n−1} |S^{n−1}| B₀ for every p strictly inside (1, n)
        let p = 1.0 + t * (n as f64 - 1.0);
        let a = strange_coefficient(n, p, c0).unwrap();
        let b = b_zero(n, p, c0).unwrap();
        let rhs = c0.powf(n as f64 - 1.0) * sphere_area(n) * b;
        prop_assert!((a - rhs).abs() <= 1e-12 * a.abs().max(rhs.abs()));
    }

    #[test]
    fn strange_term_stays_nonexpansive_under_random_laws(
        family in 0..4usize,
        slope in 0.2f64..3.0,
        q in 0.3f64..1.0,
        c0 in 0.4f64..2.5,
        r1 in -3.0f64..4.0,
        dr in 0.0f64..2.0,
    ) {
        let k = match family {
            0 => Kinetics::linear(slope).unwrap(),
            1 => Kinetics::power(slope, q).unwrap(),
            2 => Kinetics::heaviside(),
            _ => Kinetics::signorini(Kinetics::linear(slope).unwrap()),
        };
        let term = strange_term(k, 3, 2.0, c0).unwrap();
        let (h1, h2) = (term.evaluate(r1).unwrap(), term.evaluate(r1 + dr).unwrap());
        prop_assert!(h2 - h1 >= -2e-12);
        prop_assert!(h2 - h1 <= dr + 2e-12);
    }

    #[test]
    fn critical_scale_agrees_with_the_law_at_criticality(
        n in 3u32..6,
        t in 0.1f64..0.9,
        c0 in 0.2f64..2.0,
        eps in 0.01f64..0.5,
    ) {
        let p = 1.0 + t * (n as f64 - 1.0);
        let alpha = n as f64 / (n as f64 - p);
        let law = ScalingLaw::power(n, p, c0, alpha, 0.0).unwrap();
        prop_assert_eq!(law.regime(), Regime::Critical);
        let a = law.a_eps(eps);
        let want = c0 * law.critical_scale(eps);
        prop_assert!((a - want).abs() <= 1e-12 * want.abs().max(1e-300));
    }
}
