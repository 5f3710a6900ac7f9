//! Quick invariant checks run by `orthotest selftest`.

use std::io::Write;

use orthotest::chisq::local_power;
use orthotest::dist::derive_seed;
use orthotest::gmm::{efficient_influence, kl_projection};
use orthotest::instances;
use orthotest::mc::{run_experiment, ExperimentConfig, ScoreSpec};
use orthotest::path::{hellinger_residual, numerical_score, path_distribution, LocalPath};
use orthotest::predict::{dwh_contrast_basis, hall_split, hausman_noncentrality, j_noncentrality, predicted_bias};
use orthotest::score::{gmm_tangent_basis, iv_tangent_bases, norm};
use orthotest::{DiscreteDistribution, Estimator, Instance, ScoreFunction, SubspaceBasis, TestKind, Tilt};

type Check = std::result::Result<(), String>;
type NamedCheck = (&'static str, fn() -> Check);

/// Uniform on [−1, 1), reproducible in (seed, i).
fn unif(seed: u64, i: u64) -> f64 {
    (derive_seed(seed, i) >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn random_in(basis: &SubspaceBasis, seed: u64) -> ScoreFunction {
    let coords: Vec<f64> = (0..basis.dim() as u64).map(|i| unif(seed, i)).collect();
    basis.combine(&coords).expect("coordinates match the basis")
}

fn random_score(dist: &DiscreteDistribution, seed: u64) -> ScoreFunction {
    let raw = (0..dist.len() as u64).map(|i| unif(seed, i)).collect();
    ScoreFunction::centered(dist, raw).expect("finite values")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn orthogonal_channels() -> Check {
    let (d, model, theta0) = instances::g1();
    let (t, t_perp) = gmm_tangent_basis(&d, &model, &theta0).map_err(|e| e.to_string())?;
    let nu = efficient_influence(&d, &model, &theta0).map_err(|e| e.to_string())?.nu;
    for k in 0..50 {
        let g = random_in(&t, 100 + k);
        let ncp = j_noncentrality(&d, &model, &theta0, &g).map_err(|e| e.to_string())?;
        ensure(ncp < 1e-10, || {
            format!("J noncentrality {ncp:e} for a tangent direction")
        })?;
        let g = random_in(&t_perp, 200 + k);
        let b = predicted_bias(&d, &nu, &g).map_err(|e| e.to_string())?;
        ensure(b[0].abs() < 1e-10, || {
            format!("bias {:e} for an orthogonal direction", b[0])
        })?;
    }
    Ok(())
}

fn hall_parts_orthogonal() -> Check {
    let (d, model, theta0) = instances::g1();
    for k in 0..50 {
        let g = random_score(&d, 300 + k);
        let s = hall_split(&d, &model, &theta0, &g).map_err(|e| e.to_string())?;
        let dot: f64 = s.identifying.iter().zip(&s.overidentifying).map(|(a, b)| a * b).sum();
        ensure(dot.abs() < 1e-12, || format!("identifying·overidentifying = {dot:e}"))?;
    }
    Ok(())
}

fn iv_subspaces() -> Check {
    let (d, model) = instances::iv1();
    let b = iv_tangent_bases(&d, &model).map_err(|e| e.to_string())?;
    let dims = (b.t.dim(), b.t_perp_cap_m.dim(), b.m_perp.dim());
    ensure(dims == (5, 2, 0), || format!("dimensions {dims:?}, expected (5, 2, 0)"))?;
    let f = dwh_contrast_basis(&d, &model).map_err(|e| e.to_string())?;
    let g = ScoreFunction::new(&d, d.map(|r| 2.0 * (r[3] - r[1] / 2.0) * (r[0] - r[1]))).map_err(|e| e.to_string())?;
    let (ncp, dof) = hausman_noncentrality(&d, &f, &g).map_err(|e| e.to_string())?;
    ensure(dof == 1 && (ncp - 2.0).abs() < 1e-12, || {
        format!("Hausman (ncp, dof) = ({ncp}, {dof})")
    })
}

fn power_at_zero_is_size() -> Check {
    for k in 1..=5 {
        for alpha in [0.01, 0.05, 0.10] {
            let p = local_power(k, 0.0, alpha).map_err(|e| e.to_string())?;
            ensure((p - alpha).abs() < 1e-8, || {
                format!("power {p} at ncp 0, k = {k}, alpha = {alpha}")
            })?;
        }
    }
    Ok(())
}

fn quadratic_mean_rate() -> Check {
    for inst in [Instance::g1(), Instance::iv1()] {
        let d = inst.dist();
        for k in 0..10 {
            let g = random_score(d, 400 + k);
            let path = LocalPath::exponential(d.clone(), g).map_err(|e| e.to_string())?;
            let r: Vec<f64> = [0.1, 0.05, 0.025]
                .iter()
                .map(|&t| hellinger_residual(&path, t).map(|v| v / (t * t)))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let (lo, hi) = r
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            ensure(lo > 0.0 && hi / lo <= 4.0, || format!("residual/t² spread {r:?}"))?;
        }
    }
    Ok(())
}

fn path_scores() -> Check {
    let (d, _, _) = instances::g1();
    let g = random_score(&d, 500);
    for tilt in [Tilt::Exponential, Tilt::Linear] {
        let path = LocalPath::new(d.clone(), g.clone(), tilt).map_err(|e| e.to_string())?;
        let num = numerical_score(&path, 1e-5).map_err(|e| e.to_string())?;
        let err = num
            .iter()
            .zip(g.values())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        ensure(err < 1e-6, || format!("finite-difference score error {err:e}"))?;
        let q = path_distribution(&path, 0.1).map_err(|e| e.to_string())?;
        let total: f64 = q.probs().iter().sum();
        ensure((total - 1.0).abs() < 1e-12, || format!("probabilities sum to {total}"))?;
    }
    Ok(())
}

fn kl_projection_duality() -> Check {
    let (d, model, theta0) = instances::g1();
    let at_truth = kl_projection(&d, &model, &theta0).map_err(|e| e.to_string())?;
    ensure(at_truth.lambda.norm() < 1e-10, || {
        format!("λ at the truth has norm {:e}", at_truth.lambda.norm())
    })?;
    for k in 0..10 {
        let probs: Vec<f64> = (0..d.len() as u64).map(|i| 1.5 + unif(600 + k, i)).collect();
        let eta = d.with_probs(probs).map_err(|e| e.to_string())?;
        let theta = [0.3 * unif(700, k)];
        let proj = kl_projection(&eta, &model, &theta).map_err(|e| e.to_string())?;
        for j in 0..2 {
            let mj: Vec<f64> = proj.dist.map(|x| {
                let u = x[0] - theta[0];
                if j == 0 {
                    u
                } else {
                    u * u - 1.2
                }
            });
            let gap = proj.dist.mean_of(&mj);
            ensure(gap.abs() < 1e-10, || format!("moment {j} violated by {gap:e}"))?;
        }
    }
    Ok(())
}

fn mc_determinism() -> Check {
    let config = ExperimentConfig {
        instance: Instance::g1(),
        score: ScoreSpec {
            t_perp_cap_m: vec![1.0],
            ..Default::default()
        },
        tilt: Tilt::Exponential,
        n: 100,
        reps: 100,
        alpha: 0.05,
        master_seed: 5,
        estimators: vec![Estimator::Gmm],
        tests: vec![TestKind::J],
    };
    let a = run_experiment(&config).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let b = pool.install(|| run_experiment(&config)).map_err(|e| e.to_string())?;
    ensure(a == b, || "summaries differ between thread counts".into())
}

fn efficient_influence_in_tangent() -> Check {
    let (d, model, theta0) = instances::g1();
    let inf = efficient_influence(&d, &model, &theta0).map_err(|e| e.to_string())?;
    ensure(inf.tangent_residual < 1e-10, || {
        format!(
            "influence function leaves the tangent space by {:e}",
            inf.tangent_residual
        )
    })?;
    let n = norm(&d, &inf.nu[0]).map_err(|e| e.to_string())?;
    ensure((n * n - 1.2).abs() < 1e-12, || format!("Var ν = {}", n * n))
}

pub const CHECKS: [NamedCheck; 9] = [
    ("orthogonal bias and J channels", orthogonal_channels),
    ("Hall split orthogonality", hall_parts_orthogonal),
    ("IV tangent subspaces and Hausman noncentrality", iv_subspaces),
    ("local power at zero noncentrality", power_at_zero_is_size),
    ("quadratic-mean rate of Hellinger residuals", quadratic_mean_rate),
    ("path scores and normalization", path_scores),
    ("KL projection feasibility and duality", kl_projection_duality),
    ("efficient influence function", efficient_influence_in_tangent),
    ("Monte Carlo determinism across thread counts", mc_determinism),
];

/// Runs every check, writing one line per check; true if all pass.
pub fn run(out: &mut dyn Write) -> bool {
    let mut all = true;
    for (name, check) in CHECKS {
        let res = check();
        let line = match &res {
            Ok(()) => format!("ok    {name}"),
            Err(msg) => format!("FAIL  {name}: {msg}"),
        };
        let _ = writeln!(out, "{line}");
        all &= res.is_ok();
    }
    all
}
