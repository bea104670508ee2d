//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sfuqr::bootstrap::{Bootstrap, BootstrapConfig, DensitySource};
use sfuqr::correlation;
use sfuqr::eigen::{
    basis_from_sites, exact_basis, moran_coefficient, nystrom_basis, nystrom_extension, BasisMode,
    EigenBasis,
};
use sfuqr::estimator::{
    fit_at_theta, fit_cached, fit_lm, fit_reesf, gls_solve, gram_cache, residual_ss,
    restricted_loglik, v_matrix, Moments, SpatialVariance,
};
use sfuqr::geometry::{build_connectivity, kmeans_anchors, Kernel, Range, SiteSet};
use sfuqr::model::{analyze, analyze_with_basis, fit_uqr, AnalysisSpec, Mode, Timing};
use sfuqr::rif::{rif_vector, Bandwidth, QuantileSpec};
use sfuqr::simdata::{generate, SimSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_sites(n: usize, rng: &mut ChaCha8Rng) -> SiteSet {
    SiteSet::new((0..n).map(|_| [rng.random(), rng.random()]).collect()).unwrap()
}

fn design(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) })
}

fn tau(t: f64) -> QuantileSpec {
    QuantileSpec::new(t).unwrap()
}

fn c1_eigen_invariants() -> Outcome {
    let mut worst = [0.0f64; 4];
    let mut dominated = true;
    for set in 0..10 {
        let n = if set % 2 == 0 { 50 } else { 200 };
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + set);
        let sites = random_sites(n, &mut rng);
        let c = build_connectivity(&sites, Range::Auto).unwrap();
        let b = exact_basis(&c, 200).unwrap();
        let e = b.vectors();
        let l = b.len();

        let means = (0..l).map(|j| e.column(j).mean().abs()).fold(0.0, f64::max);
        let ortho = (e.transpose() * e - DMatrix::<f64>::identity(l, l)).amax();
        let m = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let mcm = &m * c.entries() * &m;
        let resid = (0..l)
            .map(|j| (&mcm * e.column(j) - e.column(j) * b.values()[j]).amax())
            .fold(0.0, f64::max);
        let total = c.entries().sum();
        let mc_err = (0..l)
            .map(|j| {
                let col: Vec<f64> = e.column(j).iter().copied().collect();
                let mc = moran_coefficient(&col, &c).unwrap();
                (mc - n as f64 * b.values()[j] / total).abs()
            })
            .fold(0.0, f64::max);
        for (w, v) in worst.iter_mut().zip([means, ortho, resid, mc_err]) {
            *w = w.max(v);
        }

        let e1: Vec<f64> = e.column(0).iter().copied().collect();
        let mc1 = moran_coefficient(&e1, &c).unwrap();
        for _ in 0..200 {
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            if moran_coefficient(&z, &c).unwrap() >= mc1 {
                dominated = false;
            }
        }
    }
    let pass = worst[0] <= 1e-10 && worst[1] <= 1e-8 && worst[2] <= 1e-8 && worst[3] <= 1e-8 && dominated;
    outcome(
        pass,
        format!(
            "max |mean| {:.1e}, max |E'E-I| {:.1e}, eigen residual {:.1e}, MC error {:.1e}, e1 dominates: {dominated}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn mean_abs_corr(a: &DMatrix<f64>, b: &DMatrix<f64>, m: usize) -> f64 {
    (0..m)
        .map(|j| {
            let x: Vec<f64> = a.column(j).iter().copied().collect();
            let y: Vec<f64> = b.column(j).iter().copied().collect();
            correlation(&x, &y).abs()
        })
        .sum::<f64>()
        / m as f64
}

fn c2_nystrom_fidelity() -> Outcome {
    let sets = 10;
    let (mut total, mut total_plain, mut lowest) = (0.0, 0.0, f64::INFINITY);
    for set in 0..sets {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + set);
        let sites = random_sites(500, &mut rng);
        let range = Range::Auto.resolve(&sites).unwrap();
        let exact = exact_basis(&build_connectivity(&sites, Range::Fixed(range)).unwrap(), 200).unwrap();
        let anchors = kmeans_anchors(&sites, 200, set).unwrap();
        let approx = nystrom_basis(&sites, &anchors, range, 200).unwrap();
        let (plain, _) = nystrom_extension(&sites, &anchors, range, Kernel::Exponential).unwrap();
        let c = mean_abs_corr(exact.vectors(), approx.vectors(), 50);
        total += c;
        lowest = lowest.min(c);
        // the plain extension may retain fewer than 50 positive patterns; missing ones count as 0
        total_plain += mean_abs_corr(exact.vectors(), &plain, plain.ncols().min(50)) * plain.ncols().min(50) as f64 / 50.0;
    }
    let mean = total / sets as f64;
    outcome(
        mean >= 0.95,
        format!(
            "mean |corr| of first 50 vectors over {sets} site sets = {mean:.4} (lowest set {lowest:.4}); plain extension {:.4}",
            total_plain / sets as f64
        ),
    )
}

/// Type-II REML profile log-likelihood from the N x N marginal covariance
/// `H = Z Z' + I`, `Z = E V`.
fn direct_loglik(r: &[f64], x: &DMatrix<f64>, e: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = x.nrows();
    let k = x.ncols();
    let z = e * DMatrix::from_diagonal(&DVector::from_column_slice(v));
    let h = &z * z.transpose() + DMatrix::<f64>::identity(n, n);
    let hc = h.cholesky().unwrap();
    let logdet_h: f64 = 2.0 * hc.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let hinv_x = hc.solve(x);
    let xhx = x.transpose() * &hinv_x;
    let xc = xhx.clone().cholesky().unwrap();
    let logdet_xhx: f64 = 2.0 * xc.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let rv = DVector::from_column_slice(r);
    let hinv_r = hc.solve(&rv);
    let beta = xc.solve(&(x.transpose() * &hinv_r));
    let resid = &rv - x * beta;
    let p = resid.dot(&hc.solve(&resid));
    let dof = (n - k) as f64;
    -0.5 * (logdet_h + logdet_xhx) - 0.5 * dof * (1.0 + (2.0 * PI * p / dof).ln())
}

fn random_theta(rng: &mut ChaCha8Rng) -> SpatialVariance {
    let alpha = 10f64.powf(rng.random_range(-1.0..1.0));
    let sg = 10f64.powf(rng.random_range(-2.0..1.0));
    SpatialVariance::new(alpha, sg).unwrap()
}

fn c3_likelihood_paths() -> Outcome {
    let (mut worst_ll, mut worst_rss) = (0.0f64, 0.0f64);
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + inst);
        let sites = random_sites(200, &mut rng);
        // exact, orthonormal Nyström, and a non-orthogonal extension (dense path)
        let range = Range::Auto.resolve(&sites).unwrap();
        let basis = match inst % 3 {
            0 => exact_basis(&build_connectivity(&sites, Range::Fixed(range)).unwrap(), 30).unwrap(),
            1 => {
                let anchors = kmeans_anchors(&sites, 60, inst).unwrap();
                nystrom_basis(&sites, &anchors, range, 30).unwrap()
            }
            _ => {
                let anchors = kmeans_anchors(&sites, 60, inst).unwrap();
                let (e, v) = nystrom_extension(&sites, &anchors, range, Kernel::Exponential).unwrap();
                let l = e.ncols().min(30);
                EigenBasis::from_parts(e.columns(0, l).into_owned(), v[..l].to_vec(), false).unwrap()
            }
        };
        let x = design(200, 4, &mut rng);
        let truth = DVector::from_iterator(basis.len(), (0..basis.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let spatial = basis.vectors() * truth;
        let r: Vec<f64> = (0..200)
            .map(|i| x.row(i).sum() + spatial[i] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let gram = gram_cache(&x, &basis).unwrap();
        let mom = Moments::new(&x, &basis, &r).unwrap();
        for _ in 0..20 {
            let theta = random_theta(&mut rng);
            let v = v_matrix(theta, basis.values());
            let fast = restricted_loglik(&gram, &mom, theta).unwrap();
            let direct = direct_loglik(&r, &x, basis.vectors(), &v);
            worst_ll = worst_ll.max((fast - direct).abs());

            let (beta, u) = gls_solve(&gram, &mom, theta).unwrap();
            let vu = DVector::from_iterator(v.len(), v.iter().zip(&u).map(|(a, b)| a * b));
            let fitted = &x * DVector::from_column_slice(&beta) + basis.vectors() * vu;
            let direct_rss: f64 = r.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            let rss = residual_ss(&gram, &mom, theta).unwrap();
            worst_rss = worst_rss.max((rss - direct_rss).abs() / direct_rss);
        }
    }
    outcome(
        worst_ll <= 1e-6 && worst_rss <= 1e-8,
        format!("max |loglik diff| {worst_ll:.2e}, max relative RSS diff {worst_rss:.2e}"),
    )
}

fn c4_gls_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + inst);
        let sites = random_sites(150, &mut rng);
        let basis = exact_basis(&build_connectivity(&sites, Range::Auto).unwrap(), 40).unwrap();
        let (n, k, l) = (150, 3, basis.len());
        let x = design(n, k, &mut rng);
        let r: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let theta = random_theta(&mut rng);
        let v = v_matrix(theta, basis.values());

        // [X  E V; 0  I] [beta; u] ~ [r; 0]
        let mut a = DMatrix::zeros(n + l, k + l);
        a.view_mut((0, 0), (n, k)).copy_from(&x);
        let ev = basis.vectors() * DMatrix::from_diagonal(&DVector::from_column_slice(&v));
        a.view_mut((0, k), (n, l)).copy_from(&ev);
        a.view_mut((n, k), (l, l)).fill_with_identity();
        let mut rhs = DVector::zeros(n + l);
        rhs.rows_mut(0, n).copy_from_slice(&r);
        let qr = a.qr();
        let sol = qr.r().solve_upper_triangular(&(qr.q().transpose() * rhs)).unwrap();

        let gram = gram_cache(&x, &basis).unwrap();
        let mom = Moments::new(&x, &basis, &r).unwrap();
        let (beta, u) = gls_solve(&gram, &mom, theta).unwrap();
        for (i, b) in beta.iter().chain(&u).enumerate() {
            worst = worst.max((b - sol[i]).abs());
        }
    }
    outcome(worst <= 1e-8, format!("max |GLS - augmented QR| = {worst:.2e}"))
}

fn c5_rif_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
    let mut ok = true;
    let mut notes = Vec::new();
    for t in [0.1, 0.5, 0.9] {
        let r = rif_vector(&y, tau(t), Bandwidth::Auto).unwrap();
        let f = r.density.value_at_quantile;
        let below = r.q_hat + (t - 1.0) / f;
        let above = r.q_hat + t / f;
        let two_point = r
            .values
            .iter()
            .zip(&y)
            .all(|(v, yi)| *v == if *yi <= r.q_hat { below } else { above });
        let mean = r.values.iter().sum::<f64>() / 1000.0;
        let gap = (mean - r.q_hat).abs();
        let bound = 1.0 / (1000.0 * f);
        ok &= two_point && gap <= bound;
        notes.push(format!("tau {t}: two-point {two_point}, |mean-q| {gap:.2e} <= {bound:.2e}"));
    }
    outcome(ok, notes.join("; "))
}

fn c6_parameter_recovery() -> Outcome {
    let beta_true = [1.0, 2.0, -1.0];
    let (mut beta_ok, mut theta_ok) = (0, 0);
    let seeds = 20;
    for seed in 0..seeds {
        let d = generate(&SimSpec {
            n: 1000,
            beta: beta_true.to_vec(),
            sg_ratio: 2.0,
            alpha: 1.0,
            seed: 6000 + seed,
            ..Default::default()
        })
        .unwrap();
        let spec = AnalysisSpec {
            taus: vec![tau(0.5)],
            mode: Mode::Sfuqr,
            bootstrap: Some(BootstrapConfig { replicates: 100, seed, ..Default::default() }),
            ..Default::default()
        };
        let (mut timing, mut warnings) = (Timing::default(), Vec::new());
        let (entries, _) = analyze_with_basis(&d.y, &d.x, &d.basis, &spec, &mut timing, &mut warnings).unwrap();
        let e = &entries[0];
        let se = e.se();
        if (0..3).all(|j| (e.fit.beta[j] - beta_true[j]).abs() <= 3.0 * se[j]) {
            beta_ok += 1;
        }
        // spatial variance parameters belong to the mean model
        let mean_fit = fit_reesf(&d.y, &d.x, &d.basis).unwrap();
        if (1.0..=4.0).contains(&mean_fit.sg_ratio) && (0.5..=2.0).contains(&mean_fit.alpha) {
            theta_ok += 1;
        }
    }
    let pass = beta_ok * 10 >= seeds * 9 && theta_ok * 10 >= seeds * 8;
    outcome(pass, format!("beta within 3 SE in {beta_ok}/{seeds}; sg_ratio and alpha in range in {theta_ok}/{seeds}"))
}

fn c7_null_control() -> Outcome {
    let seeds = 20;
    let mut close = 0;
    for seed in 0..seeds {
        let d = generate(&SimSpec { n: 500, sg_ratio: 0.0, seed: 7000 + seed, ..Default::default() }).unwrap();
        let spec = AnalysisSpec {
            taus: vec![tau(0.5)],
            bootstrap: Some(BootstrapConfig { replicates: 100, seed, ..Default::default() }),
            ..Default::default()
        };
        let (mut timing, mut warnings) = (Timing::default(), Vec::new());
        let (sf, _) = analyze_with_basis(&d.y, &d.x, &d.basis, &spec, &mut timing, &mut warnings).unwrap();
        let plain = fit_uqr(&d.y, &d.x, &AnalysisSpec { bootstrap: None, ..spec }).unwrap();
        let se = sf[0].se();
        if (0..3).all(|j| (sf[0].fit.beta[j] - plain.entries[0].fit.beta[j]).abs() <= se[j]) {
            close += 1;
        }
    }
    let mut calm = 0;
    for seed in 0..100 {
        let d = generate(&SimSpec { n: 200, sg_ratio: 0.0, seed: 7100 + seed, ..Default::default() }).unwrap();
        let spec = AnalysisSpec {
            mode: Mode::Lm,
            bootstrap: None,
            ..Default::default()
        };
        let rep = analyze(&d.y, &d.x, Some(&d.sites), &spec).unwrap();
        if rep.diagnostics.residual_moran_lm.unwrap().z.abs() < 4.0 {
            calm += 1;
        }
    }
    outcome(
        close * 10 >= seeds * 9 && calm >= 95,
        format!("SF-UQR within 1 SE of UQR in {close}/{seeds}; OLS Moran |z| < 4 in {calm}/100"),
    )
}

fn c8_bootstrap_validity() -> Outcome {
    let beta_true = [1.0, 2.0, -1.0];
    let datasets = 50;
    let mut covered = [0usize; 3];
    let mut ratio_sum = [0.0f64; 3];
    for seed in 0..datasets {
        let d = generate(&SimSpec { n: 500, seed: 8000 + seed, ..Default::default() }).unwrap();
        let rif = rif_vector(&d.y, tau(0.5), Bandwidth::Auto).unwrap();
        let gram = gram_cache(&d.x, &d.basis).unwrap();
        let mom = Moments::new(&d.x, &d.basis, &rif.values).unwrap();
        let fit = fit_cached(&gram, &mom).unwrap();
        let source = DensitySource {
            y: &d.y,
            q_hat: rif.q_hat,
            f_hat: rif.density.value_at_quantile,
            bandwidth: rif.density.bandwidth,
        };
        let boot = Bootstrap::new(&fit, &gram, &d.basis, &d.x, Some(source)).unwrap();
        let cfg = BootstrapConfig { replicates: 100, seed, ..Default::default() };
        let full = boot.run(&cfg).unwrap();
        for j in 0..3 {
            if full.ci_lower[j] <= beta_true[j] && beta_true[j] <= full.ci_upper[j] {
                covered[j] += 1;
            }
        }
        let frozen = boot.run(&BootstrapConfig { resample_density: false, ..cfg }).unwrap();
        for j in 0..3 {
            ratio_sum[j] += frozen.se[j] / fit.se[j];
        }
    }
    let rates: Vec<f64> = covered.iter().map(|c| *c as f64 / datasets as f64).collect();
    let ratios: Vec<f64> = ratio_sum.iter().map(|s| s / datasets as f64).collect();
    let pass = rates.iter().all(|r| (0.85..=0.99).contains(r)) && ratios.iter().all(|r| (r - 1.0).abs() <= 0.25);
    outcome(pass, format!("coverage {rates:?}; mean frozen/analytic SE ratio {ratios:.3?}"))
}

fn per_replicate_secs(n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9000 + n as u64);
    let sites = random_sites(n, &mut rng);
    let (basis, _) = basis_from_sites(
        &sites,
        BasisMode::Nystrom { anchors: 200, seed: 1 },
        Range::Auto,
        Kernel::Exponential,
        200,
    )
    .unwrap();
    let x = design(n, 3, &mut rng);
    let y: Vec<f64> = (0..n)
        .map(|i| x.row(i).sum() + basis.vectors()[(i, 0)] * 20.0 + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let rif = rif_vector(&y, tau(0.5), Bandwidth::Auto).unwrap();
    let gram = gram_cache(&x, &basis).unwrap();
    let mom = Moments::new(&x, &basis, &rif.values).unwrap();
    let fit = fit_cached(&gram, &mom).unwrap();
    let source = DensitySource {
        y: &y,
        q_hat: rif.q_hat,
        f_hat: rif.density.value_at_quantile,
        bandwidth: rif.density.bandwidth,
    };
    let boot = Bootstrap::new(&fit, &gram, &basis, &x, Some(source)).unwrap();
    let res = boot
        .run(&BootstrapConfig { replicates: 20, seed: 1, ..Default::default() })
        .unwrap();
    res.timing.mean_replicate_secs
}

fn c9_scaling() -> Outcome {
    let small = per_replicate_secs(5_000);
    let large = per_replicate_secs(20_000);
    let ratio = large / small;
    outcome(
        ratio <= 3.0,
        format!("per-replicate {small:.4}s at N=5000, {large:.4}s at N=20000, ratio {ratio:.2}"),
    )
}

fn c10_reductions_and_determinism() -> Outcome {
    let d = generate(&SimSpec { n: 300, sg_ratio: 1.0, seed: 10, ..Default::default() }).unwrap();
    let taus = vec![tau(0.25), tau(0.5), tau(0.75)];
    let no_boot = AnalysisSpec { taus: taus.clone(), bootstrap: None, ..Default::default() };

    let (mut t, mut w) = (Timing::default(), Vec::new());
    let (empty, _) = analyze_with_basis(&d.y, &d.x, &EigenBasis::empty(300), &no_boot, &mut t, &mut w).unwrap();
    let plain = fit_uqr(&d.y, &d.x, &no_boot).unwrap();
    let diff_uqr = empty
        .iter()
        .zip(&plain.entries)
        .flat_map(|(a, b)| a.fit.beta.iter().zip(&b.fit.beta).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);

    // regression machinery on the raw response, against a QR least-squares oracle
    let empty_basis = EigenBasis::empty(300);
    let gram = gram_cache(&d.x, &empty_basis).unwrap();
    let mom = Moments::new(&d.x, &empty_basis, &d.y).unwrap();
    let raw = fit_at_theta(&gram, &mom, SpatialVariance::none()).unwrap();
    let lm = fit_lm(&d.y, &d.x).unwrap();
    let qr = d.x.clone().qr();
    let ols = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * DVector::from_column_slice(&d.y)))
        .unwrap();
    let diff_lm = raw
        .beta
        .iter()
        .zip(&lm.beta)
        .map(|(a, b)| (a - b).abs())
        .chain(lm.beta.iter().zip(ols.iter()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);

    let boot_spec = |workers| AnalysisSpec {
        taus: taus.clone(),
        bootstrap: Some(BootstrapConfig { replicates: 40, seed: 99, workers, ..Default::default() }),
        moran_diagnostic: false,
        ..Default::default()
    };
    let run = |workers| analyze(&d.y, &d.x, Some(&d.sites), &boot_spec(workers)).unwrap();
    let same = |a: &sfuqr::model::AnalysisReport, b: &sfuqr::model::AnalysisReport| {
        a.entries.iter().zip(&b.entries).all(|(x, y)| {
            x.fit == y.fit && x.bootstrap.as_ref().unwrap().same_estimates(y.bootstrap.as_ref().unwrap())
        })
    };
    let (a1, a2) = (run(1), run(1));
    let (b1, b2) = (run(4), run(4));
    let rerun = same(&a1, &a2) && same(&b1, &b2);
    let across = same(&a1, &b1);

    outcome(
        diff_uqr <= 1e-12 && diff_lm <= 1e-12 && rerun,
        format!(
            "empty-basis vs UQR {diff_uqr:.1e}; raw-response vs LM {diff_lm:.1e}; reruns identical: {rerun} (also across worker counts: {across})"
        ),
    )
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 eigen-basis invariants", c1_eigen_invariants),
        ("2 Nystrom fidelity", c2_nystrom_fidelity),
        ("3 likelihood-path equivalence", c3_likelihood_paths),
        ("4 GLS oracle", c4_gls_oracle),
        ("5 RIF properties", c5_rif_properties),
        ("6 parameter recovery", c6_parameter_recovery),
        ("7 null-spatial control", c7_null_control),
        ("8 bootstrap validity", c8_bootstrap_validity),
        ("9 fast-path scaling", c9_scaling),
        ("10 reduction chain and determinism", c10_reductions_and_determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let status = if out.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} criterion {name}: {} ({:.1}s)",
            out.detail,
            start.elapsed().as_secs_f64()
        );
        if !out.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
