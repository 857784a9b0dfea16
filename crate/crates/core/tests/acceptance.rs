//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to see them.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use agg_core::epsnet::{Activation, EpsNet};
use agg_core::guidance::{
    loss_grad_wrt_xt, perturb_eps, DirectionalStyle, GuidanceConfig, Objective, SRule, StandInEmbedder, Strategy,
};
use agg_core::harness::{load_config, run_experiment, Experiment, RunReport, Variant};
use agg_core::sampler::{cached_reverse_step, ddim_forward_invert, EditSchedule, NoiseStream, Translator};
use agg_core::schedule::NoiseSchedule;
use agg_core::score_models::{denoise, tweedie_denoise, EpsModel, GmmModel};
use common::{fd_grad, normal_vec, random_gmm, rel_err, sched};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Check {
    id: u8,
    title: &'static str,
    limit: Duration,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(id: u8, title: &'static str, limit_secs: u64, f: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (pass, detail) = f();
    Check {
        id,
        title,
        limit: Duration::from_secs(limit_secs),
        pass,
        detail,
        elapsed: start.elapsed(),
    }
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn tweedie_exactness() -> (bool, String) {
    let s = sched(60, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mu = normal_vec(&mut rng, 3);
        let v = rng.random_range(0.05..3.0);
        let m = GmmModel::single(mu.clone(), v).unwrap();
        for t in 1..=60 {
            let ab = s.alpha_bar(t);
            let x_t = normal_vec(&mut rng, 3) * 2.0;
            let exact = (&x_t * (ab.sqrt() * v) + &mu * (1.0 - ab)) / (ab * v + 1.0 - ab);
            worst = worst.max((tweedie_denoise(&m, &s, &x_t, t).unwrap() - exact).amax());
        }
    }
    (worst < 1e-8, format!("max abs error {worst:.2e}"))
}

fn equivalence_identity() -> (bool, String) {
    let s = sched(60, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=60);
        let ab = s.alpha_bar(t);
        let x_t = normal_vec(&mut rng, 2);
        let eps = normal_vec(&mut rng, 2);
        let g = normal_vec(&mut rng, 2);
        let sc: f64 = rng.random_range(0.0..1.0);
        let lhs = denoise(&s, &x_t, &perturb_eps(&eps, &g, sc), t);
        let rhs = denoise(&s, &x_t, &eps, t) - &g * (sc * ((1.0 - ab) / ab).sqrt());
        worst = worst.max((lhs - rhs).norm());
    }
    (worst < 1e-12, format!("max norm {worst:.2e} over 1000 cases"))
}

fn gradient_correctness() -> (bool, String) {
    let s = sched(60, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut loss_w, mut gmm_w, mut net_w): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let net = EpsNet::new(2, &[16, 16], 4, Activation::Softplus, 9).unwrap();
    for _ in 0..100 {
        let d = rng.random_range(1..=3);
        let m = random_gmm(&mut rng, 2, d);
        let t = rng.random_range(1..=60);
        let x = normal_vec(&mut rng, d);
        let v = normal_vec(&mut rng, d);

        let emb = StandInEmbedder::new(d, 6, rng.random())
            .unwrap()
            .with_augmentation(4, 0.01, 3);
        let c_src = emb.embed(&normal_vec(&mut rng, d)).unwrap();
        let c_trg = emb.embed(&normal_vec(&mut rng, d)).unwrap();
        let style = DirectionalStyle::new(emb, &normal_vec(&mut rng, d), &c_src, &c_trg, 0.3, 0.2).unwrap();
        let (_, g) = loss_grad_wrt_xt(&m, &s, &style, &x, t).unwrap();
        let fd = fd_grad(
            |y| style.value(&tweedie_denoise(&m, &s, y, t).unwrap()).unwrap(),
            &x,
            1e-5,
        );
        loss_w = loss_w.max(rel_err(&g, &fd));

        let fd = fd_grad(|y| m.eps(&s, y, t).unwrap().dot(&v), &x, 1e-5);
        gmm_w = gmm_w.max(rel_err(&m.eps_vjp(&s, &x, t, &v).unwrap(), &fd));

        let (x2, v2) = (normal_vec(&mut rng, 2), normal_vec(&mut rng, 2));
        let fd = fd_grad(|y| net.eps(&s, y, t).unwrap().dot(&v2), &x2, 1e-5);
        net_w = net_w.max(rel_err(&net.eps_vjp(&s, &x2, t, &v2).unwrap(), &fd));
    }
    let worst = loss_w.max(gmm_w).max(net_w);
    (
        worst < 1e-4,
        format!("loss grad {loss_w:.1e}, gmm vjp {gmm_w:.1e}, epsnet vjp {net_w:.1e}"),
    )
}

fn round_trip(m: &GmmModel, s: &NoiseSchedule, n: usize, seed: u64) -> f64 {
    let g = GuidanceConfig {
        strategy: Strategy::None,
        t_edit: 0,
        ..GuidanceConfig::default()
    };
    let edit = EditSchedule::unmasked();
    let tr = Translator {
        forward_model: m,
        reverse_model: m,
        schedule: s,
        guidance: &g,
        edit: &edit,
        style: None,
        stochastic_inversion: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = m.sample(&mut rng).1;
            let out = tr.translate(&x, &NoiseStream::new(0, 0)).unwrap();
            (&out.x_out - &x).norm() / x.norm()
        })
        .fold(0.0, f64::max)
}

fn exact_inversion() -> (bool, String) {
    let s = sched(60, 0.8);
    let two = GmmModel::new(
        vec![0.5, 0.5],
        vec![DVector::from_vec(vec![-1.5, 0.0]), DVector::from_vec(vec![1.5, 0.0])],
        vec![0.25, 0.25],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut cached: f64 = 0.0;
    for _ in 0..50 {
        let x_src = two.sample(&mut rng).1;
        let inv = ddim_forward_invert(&two, &s, &x_src, 60).unwrap();
        let mut x = inv.x_final().clone();
        for t in (1..=60).rev() {
            x = cached_reverse_step(&s, &inv.cache, t).unwrap();
        }
        cached = cached.max((&x - &x_src).norm() / x_src.norm());
    }
    let s0 = sched(60, 0.0);
    let centred = [1.0, 2.0]
        .iter()
        .map(|&v| round_trip(&GmmModel::single(DVector::zeros(2), v).unwrap(), &s0, 50, 105))
        .fold(0.0, f64::max);
    let off = round_trip(
        &GmmModel::single(DVector::from_vec(vec![1.0, -0.5]), 0.5).unwrap(),
        &s0,
        50,
        105,
    );
    (
        cached < 1e-10 && centred < 0.02,
        format!("cached {cached:.1e}; re-evaluated worst case on N(0,I), N(0,2I) {:.2}% (off-centre N((1,-0.5),0.5I): {:.1}%)", centred * 100.0, off * 100.0),
    )
}

fn smoke(dir: &Path) -> RunReport {
    let c = load_config(&config_path("smoke.toml"), &[]).unwrap();
    let exp = Experiment::build(&c).unwrap();
    run_experiment(&exp, dir, None).unwrap()
}

fn mean(r: &RunReport, v: Variant, col: &str) -> f64 {
    r.mean(v, col).unwrap_or(f64::NAN)
}

fn translation_efficacy(r: &RunReport) -> (bool, String) {
    let agg = Variant::Guided(Strategy::Agg);
    let success = mean(r, agg, "success_rate");
    let ours = mean(r, agg, "structure");
    let resample = mean(r, Variant::DdpmResample, "structure");
    (
        r.failed() == 0 && success >= 0.8 && ours < resample,
        format!("success {success:.3}, structure {ours:.3} vs resample {resample:.3}"),
    )
}

fn ablation_ordering(r: &RunReport) -> (bool, String) {
    let agg = Variant::Guided(Strategy::Agg);
    let dds = Variant::Guided(Strategy::DdsOnly);
    let sym = Variant::Guided(Strategy::SymmetricAblation);
    let sfid = |v| mean(r, v, "sfid");
    let sfid_ok = sfid(agg) <= sfid(dds) && sfid(agg) <= sfid(Variant::NoReg);
    let others = [agg, dds, Variant::NoReg];
    let sym_structure = others
        .iter()
        .all(|&v| mean(r, sym, "structure") < mean(r, v, "structure"));
    let sym_csfid = others.iter().all(|&v| mean(r, sym, "csfid") > mean(r, v, "csfid"));
    (
        r.failed() == 0 && sfid_ok && sym_structure && sym_csfid,
        format!(
            "sfid agg {:.3} / dds_only {:.3} / no_reg {:.3}; symmetric structure {:.3}, csfid {:.3}",
            sfid(agg),
            sfid(dds),
            sfid(Variant::NoReg),
            mean(r, sym, "structure"),
            mean(r, sym, "csfid")
        ),
    )
}

fn config_defaults() -> (bool, String) {
    let image = load_config(&config_path("image-default.toml"), &[]).unwrap();
    let g = image.guidance_config(Strategy::Agg);
    let image_ok = image.schedule.steps == 60
        && image.edit.t_edit == 20
        && image.schedule.eta == 0.8
        && g.lambda_sty == 200.0
        && g.lambda_reg == 200.0
        && g.dds_lr == 0.02
        && (1..=2).contains(&g.dds_steps)
        && g.s_rule == SRule::SqrtOneMinusAlphaBar;
    let latent = load_config(&config_path("latent-default.toml"), &[]).unwrap();
    let g = latent.guidance_config(Strategy::Agg);
    let latent_ok = latent.schedule.steps == 50
        && g.lambda_reg == 0.1
        && g.dds_lr == 0.01
        && g.dds_steps == 10
        && latent.edit.t_edit2 == 40
        && (10..=20).contains(&latent.edit.t_edit1);
    (image_ok && latent_ok, format!("image {image_ok}, latent {latent_ok}"))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut checks = vec![
        timed(1, "Tweedie exactness", 1, tweedie_exactness),
        timed(2, "Equivalence identity", 1, equivalence_identity),
        timed(3, "Gradient correctness", 10, gradient_correctness),
        timed(4, "Exact inversion", 5, exact_inversion),
    ];

    let start = Instant::now();
    let first = smoke(&tmp.path().join("first"));
    let smoke_time = start.elapsed();
    let mut c5 = timed(5, "Translation efficacy", 60, || translation_efficacy(&first));
    c5.elapsed += smoke_time;
    let mut c6 = timed(6, "Ablation ordering", 300, || ablation_ordering(&first));
    c6.elapsed += smoke_time;
    checks.push(c5);
    checks.push(c6);
    checks.push(timed(7, "Config-default fidelity", 1, config_defaults));
    checks.push(timed(8, "Determinism", 60, || {
        smoke(&tmp.path().join("second"));
        let a = std::fs::read(tmp.path().join("first/metrics.csv")).unwrap();
        let b = std::fs::read(tmp.path().join("second/metrics.csv")).unwrap();
        (a == b, format!("{} bytes, identical: {}", a.len(), a == b))
    }));

    // Written through the handle so the lines show even when test output is captured.
    let mut stdout = std::io::stdout().lock();
    let mut all = true;
    for c in &checks {
        let ok = c.pass && c.elapsed <= c.limit;
        all &= ok;
        writeln!(
            stdout,
            "C{} {}: {} ({}; {:.2}s, limit {}s)",
            c.id,
            if ok { "PASS" } else { "FAIL" },
            c.title,
            c.detail,
            c.elapsed.as_secs_f64(),
            c.limit.as_secs()
        )
        .unwrap();
    }
    assert!(all, "at least one acceptance criterion failed");
}
