#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use distillkit::baselines::{leverage_scores, moment_reduce};
use distillkit::data::{homogenize, RegressionDataset};
use distillkit::envs::Transition;
use distillkit::fqi::{fqi_train, FQIConfig, TransitionBatch};
use distillkit::linreg::{LinearRegressor, LossMatcher, RegressorEnsemble};
use distillkit::nn::{one_hot, FeatureMap, Mlp2, MlpSizes};
use distillkit::rl_distill::{
    bellman_loss, decomposable_max_identity_check, mean_constraint_project, mean_constraint_residual,
    sample_ensemble, BellmanMatcher, QArch, QEnsembleSample, SyntheticOfflineDataset,
};
use distillkit::rng::{rng_from_seed, DetRng};

/// Outcome of one property: the worst measured deviation against its tolerance.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub cases: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tol
    }

    pub fn line(&self) -> String {
        format!(
            "{}: worst {:.3e} (tol {:.0e}, {} cases) {}",
            self.name,
            self.worst,
            self.tol,
            self.cases,
            if self.passed() { "ok" } else { "VIOLATED" }
        )
    }

    pub fn assert(&self) {
        assert!(self.passed(), "{}", self.line());
    }
}

pub fn gauss(rng: &mut DetRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn randn(rng: &mut DetRng, n: usize, d: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| scale * gauss(rng))
}

pub fn randn_vec(rng: &mut DetRng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * gauss(rng))
}

/// Random transitions with one-hot actions and a shared terminated flag.
pub fn random_batch(rng: &mut DetRng, n: usize, ds: usize, na: usize, terminated: bool) -> TransitionBatch {
    let s = randn(rng, n, ds, 1.0);
    let acts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..na)).collect();
    let a = DMatrix::from_fn(n, na, |i, j| if acts[i] == j { 1.0 } else { 0.0 });
    let r = randn_vec(rng, n, 1.0);
    let sn = randn(rng, n, ds, 1.0);
    TransitionBatch::new(s, a, r, sn, vec![terminated; n]).unwrap()
}

/// Like [`random_batch`] but actions are arbitrary real vectors.
pub fn relaxed_batch(rng: &mut DetRng, n: usize, ds: usize, na: usize, terminated: bool, scale: f64) -> TransitionBatch {
    TransitionBatch::new(
        randn(rng, n, ds, scale),
        randn(rng, n, na, scale),
        randn_vec(rng, n, scale),
        randn(rng, n, ds, scale),
        vec![terminated; n],
    )
    .unwrap()
}

pub fn synthetic(nonterminated: TransitionBatch, terminated: TransitionBatch, train_counts: (usize, usize)) -> SyntheticOfflineDataset {
    SyntheticOfflineDataset {
        env_name: "custom".into(),
        gamma: 0.9,
        reward_range: (-1e6, 1e6),
        nonterminated,
        terminated,
        train_counts,
    }
}

fn lerp_batch(a: &TransitionBatch, b: &TransitionBatch, t: f64) -> TransitionBatch {
    TransitionBatch {
        s: &a.s * (1.0 - t) + &b.s * t,
        a: &a.a * (1.0 - t) + &b.a * t,
        r: &a.r * (1.0 - t) + &b.r * t,
        s_next: &a.s_next * (1.0 - t) + &b.s_next * t,
        terminated: a.terminated.clone(),
    }
}

fn lerp_syn(a: &SyntheticOfflineDataset, b: &SyntheticOfflineDataset, t: f64) -> SyntheticOfflineDataset {
    SyntheticOfflineDataset {
        nonterminated: lerp_batch(&a.nonterminated, &b.nonterminated, t),
        terminated: lerp_batch(&a.terminated, &b.terminated, t),
        ..a.clone()
    }
}

/// Minimum over `[0, 1]` of the quadratic through `(0, q0)`, `(½, qh)`, `(1, q1)`.
fn quadratic_min(q0: f64, qh: f64, q1: f64) -> f64 {
    let a = 2.0 * (q1 - 2.0 * qh + q0);
    let b = q1 - q0 - a;
    let mut m = q0.min(q1);
    if a > 0.0 {
        let t = -b / (2.0 * a);
        if (0.0..=1.0).contains(&t) {
            m = m.min(q0 + b * t + a * t * t);
        }
    }
    m
}

/// Midpoint convexity of the supervised matching objective on segments along
/// which every synthetic loss stays at or above its training loss.
pub fn supervised_convexity(triples: usize) -> Check {
    let mut rng = rng_from_seed(101);
    let (n, d, m, k) = (40, 4, 8, 12);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < triples {
        let train = randn(&mut rng, n, d + 1, 1.0);
        let ens = RegressorEnsemble::sample(k, d, rng.gen()).unwrap();
        let matcher = LossMatcher::new(&train, &ens).unwrap();
        let a = randn(&mut rng, m, d + 1, 3.0);
        let b = randn(&mut rng, m, d + 1, 3.0);
        let mid = (&a + &b) * 0.5;
        let g = ens.matrix();
        let dominated = (0..k).all(|j| {
            let l = |z: &DMatrix<f64>| (z * g.column(j)).norm_squared() / m as f64;
            quadratic_min(l(&a), l(&mid), l(&b)) >= matcher.train_losses()[j]
        });
        if !dominated {
            continue;
        }
        let (fa, fb, fm) = (
            matcher.objective(&a).unwrap(),
            matcher.objective(&b).unwrap(),
            matcher.objective(&mid).unwrap(),
        );
        worst = worst.max((fm - 0.5 * (fa + fb)) / (1.0 + fa.abs() + fb.abs()));
        done += 1;
    }
    Check { name: "supervised midpoint convexity", worst: worst.max(0.0), tol: 1e-9, cases: triples }
}

/// Same check for the Bellman matching objective with linear predictors over
/// concatenated features, varying every synthetic coordinate of both partitions.
pub fn bellman_linear_convexity(triples: usize) -> Check {
    let mut rng = rng_from_seed(202);
    let (ds, na, gamma) = (3, 2, 0.9);
    let fmap = FeatureMap::concat(ds, na);
    let arch = QArch::Linear { fmap };
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < triples {
        let train = random_batch(&mut rng, 24, ds, na, false).vstack(&random_batch(&mut rng, 6, ds, na, true)).unwrap();
        let ens = sample_ensemble(&arch, ds, na, 6, arch.default_sigma(), rng.gen()).unwrap();
        let matcher = BellmanMatcher::new(&train, ens.clone(), gamma).unwrap();
        let mk = |rng: &mut DetRng| {
            synthetic(relaxed_batch(rng, 5, ds, na, false, 4.0), relaxed_batch(rng, 2, ds, na, true, 4.0), (24, 6))
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let mid = lerp_syn(&a, &b, 0.5);
        let (tr_nt, tr_t) = (train.select(&(0..24).collect::<Vec<_>>()), train.select(&(24..30).collect::<Vec<_>>()));
        let dominated = ens.iter().all(|q| {
            let ok = |pick: fn(&SyntheticOfflineDataset) -> &TransitionBatch, tr: &TransitionBatch| {
                let l = |s: &SyntheticOfflineDataset| bellman_loss(pick(s), q, gamma).unwrap();
                quadratic_min(l(&a), l(&mid), l(&b)) >= bellman_loss(tr, q, gamma).unwrap()
            };
            ok(|s| &s.nonterminated, &tr_nt) && ok(|s| &s.terminated, &tr_t)
        });
        if !dominated {
            continue;
        }
        let (fa, fb, fm) = (
            matcher.objective(&a).unwrap(),
            matcher.objective(&b).unwrap(),
            matcher.objective(&mid).unwrap(),
        );
        worst = worst.max((fm - 0.5 * (fa + fb)) / (1.0 + fa.abs() + fb.abs()));
        done += 1;
    }
    Check { name: "linear Bellman midpoint convexity", worst: worst.max(0.0), tol: 1e-9, cases: triples }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff<F: Fn(&[f64]) -> f64>(x: &[f64], h: f64, f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn supervised_gradient(instances: usize) -> Check {
    let mut rng = rng_from_seed(303);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, d, m, k) = (30, 3, 6, 10);
        let train = randn(&mut rng, n, d + 1, 1.0);
        let ens = RegressorEnsemble::sample(k, d, rng.gen()).unwrap();
        let matcher = LossMatcher::new(&train, &ens).unwrap();
        let syn = randn(&mut rng, m, d + 1, 1.0);
        let (_, g) = matcher.objective_and_gradient(&syn).unwrap();
        let fd = central_diff(syn.as_slice(), 1e-5, |p| {
            matcher.objective(&DMatrix::from_column_slice(m, d + 1, p)).unwrap()
        });
        worst = worst.max(rel_err(g.as_slice(), &fd));
    }
    Check { name: "supervised gradient vs central differences", worst, tol: 1e-5, cases: instances }
}

pub fn network_gradients(nets: usize) -> Check {
    let mut rng = rng_from_seed(404);
    let mut worst = 0.0f64;
    for _ in 0..nets {
        let sizes = MlpSizes::new(5, 7, 6);
        let net = Mlp2::init_gaussian(sizes, 0.7, &mut rng).unwrap();
        let x = randn(&mut rng, 9, 5, 1.0);
        let y = randn_vec(&mut rng, 9, 1.0);
        let (_, g) = net.grad_weights(&x, &y).unwrap();
        let fd = central_diff(&net.params(), 1e-6, |p| {
            let mut n2 = net.clone();
            n2.set_params(p).unwrap();
            n2.grad_weights(&x, &y).unwrap().0
        });
        worst = worst.max(rel_err(&g, &fd));
        let x0 = randn_vec(&mut rng, 5, 1.0);
        let gi = net.grad_input(&x0).unwrap();
        let fdi = central_diff(x0.as_slice(), 1e-6, |p| net.forward(&DVector::from_column_slice(p)).unwrap());
        worst = worst.max(rel_err(gi.as_slice(), &fdi));
    }
    Check { name: "network gradients vs central differences", worst, tol: 1e-4, cases: nets }
}

fn syn_coords(s: &SyntheticOfflineDataset) -> Vec<f64> {
    let mut v = Vec::new();
    for b in [&s.nonterminated, &s.terminated] {
        v.extend(b.s.iter());
        v.extend(b.a.iter());
        v.extend(b.r.iter());
        v.extend(b.s_next.iter());
    }
    v
}

fn set_syn_coords(s: &mut SyntheticOfflineDataset, p: &[f64]) {
    let mut k = 0;
    for b in [&mut s.nonterminated, &mut s.terminated] {
        let len = b.s.len();
        b.s.as_mut_slice().copy_from_slice(&p[k..k + len]);
        k += len;
        let len = b.a.len();
        b.a.as_mut_slice().copy_from_slice(&p[k..k + len]);
        k += len;
        let len = b.r.len();
        b.r.as_mut_slice().copy_from_slice(&p[k..k + len]);
        k += len;
        let len = b.s_next.len();
        b.s_next.as_mut_slice().copy_from_slice(&p[k..k + len]);
        k += len;
    }
}

/// Gradient of the Bellman matching objective for network and linear ensembles.
pub fn bellman_gradient(instances: usize) -> Check {
    let mut rng = rng_from_seed(505);
    let (ds, na, gamma) = (3, 3, 0.95);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let arch = if i % 2 == 0 {
            QArch::Mlp { hidden: (6, 5) }
        } else {
            QArch::Linear { fmap: FeatureMap::concat(ds, na) }
        };
        let train = random_batch(&mut rng, 20, ds, na, false).vstack(&random_batch(&mut rng, 5, ds, na, true)).unwrap();
        let ens = sample_ensemble(&arch, ds, na, 4, arch.default_sigma(), rng.gen()).unwrap();
        let matcher = BellmanMatcher::new(&train, ens, gamma).unwrap();
        let mut syn = synthetic(
            relaxed_batch(&mut rng, 4, ds, na, false, 1.0),
            relaxed_batch(&mut rng, 2, ds, na, true, 1.0),
            (20, 5),
        );
        let (_, g) = matcher.objective_and_gradient(&syn).unwrap();
        let mut analytic = Vec::new();
        for b in [&g.nonterminated, &g.terminated] {
            analytic.extend(b.s.iter());
            analytic.extend(b.a.iter());
            analytic.extend(b.r.iter());
            analytic.extend(b.s_next.iter());
        }
        let x = syn_coords(&syn);
        let probe = syn.clone();
        let fd = central_diff(&x, 1e-6, |p| {
            let mut s = probe.clone();
            set_syn_coords(&mut s, p);
            matcher.objective(&s).unwrap()
        });
        set_syn_coords(&mut syn, &x);
        worst = worst.max(rel_err(&analytic, &fd));
    }
    Check { name: "Bellman matching gradient vs central differences", worst, tol: 1e-4, cases: instances }
}

pub fn moment_reduction(datasets: usize, regressors: usize) -> Check {
    let mut rng = rng_from_seed(606);
    let mut worst = 0.0f64;
    for t in 0..datasets {
        let d = 2 + t % 5;
        let n = 20 + 7 * t;
        let x = randn(&mut rng, n, d, 1.0).map(|v| v + 0.5);
        let y = randn_vec(&mut rng, n, 2.0);
        let ds = RegressionDataset::new(x, y).unwrap();
        let red = moment_reduce(&ds).unwrap();
        let (z, zr) = (homogenize(&ds), homogenize(&red));
        for _ in 0..regressors {
            let r = randn_vec(&mut rng, d + 1, 1.0);
            let l = (&z * &r).norm_squared() / z.nrows() as f64;
            let lr = (&zr * &r).norm_squared() / zr.nrows() as f64;
            worst = worst.max((l - lr).abs() / l.max(1.0));
        }
    }
    Check { name: "moment reduction preserves every loss", worst, tol: 1e-9, cases: datasets * regressors }
}

pub fn leverage_rank(cases: usize) -> Check {
    let mut rng = rng_from_seed(707);
    let mut worst = 0.0f64;
    for t in 0..cases {
        let (n, p) = (15 + t, 2 + t % 6);
        let mut x = randn(&mut rng, n, p, 1.0);
        if t % 3 == 0 && p > 2 {
            let c = x.column(0) * 2.0 - x.column(1);
            x.set_column(p - 1, &c);
        }
        let prof = leverage_scores(&x).unwrap();
        let expected = x.rank(1e-10);
        let sum: f64 = prof.scores.iter().sum();
        worst = worst.max((sum - expected as f64).abs()).max((prof.rank as f64 - expected as f64).abs());
    }
    Check { name: "leverage scores sum to the rank", worst, tol: 1e-8, cases }
}

/// Returns 0 when every case agrees with its expected outcome, 1 otherwise.
pub fn decomposable_identity() -> Check {
    let mut rng = rng_from_seed(808);
    let s_next = randn(&mut rng, 100, 4, 1.0);
    let mut wrong = 0usize;
    let concat = FeatureMap::concat(4, 3);
    let v = randn_vec(&mut rng, concat.dim(), 1.0);
    wrong += !decomposable_max_identity_check(&v, &s_next, &concat).unwrap() as usize;
    let single = FeatureMap::concat(4, 1);
    let v1 = randn_vec(&mut rng, single.dim(), 1.0);
    wrong += !decomposable_max_identity_check(&v1, &s_next, &single).unwrap() as usize;
    let lin = FeatureMap::DecomposableLinear {
        state_proj: randn(&mut rng, 6, 4, 1.0),
        action_proj: randn(&mut rng, 6, 3, 1.0),
    };
    let vl = randn_vec(&mut rng, 6, 1.0);
    wrong += !decomposable_max_identity_check(&vl, &s_next, &lin).unwrap() as usize;
    let product = FeatureMap::Product { state_dim: 4, action_count: 3 };
    let vp = randn_vec(&mut rng, product.dim(), 1.0);
    wrong += decomposable_max_identity_check(&vp, &s_next, &product).unwrap() as usize;
    Check { name: "decomposable max identity (and its failure for product features)", worst: wrong as f64, tol: 0.0, cases: 4 }
}

/// With the first-moment constraint imposed, linear Bellman matching over
/// concatenated features equals supervised matching on `(s − γs', a)` with
/// label `r` and regressor `(v, −λ)`.
pub fn supervised_equivalence(instances: usize) -> Check {
    let mut rng = rng_from_seed(909);
    let (ds, na, gamma) = (3, 2, 0.9);
    let fmap = FeatureMap::concat(ds, na);
    let arch = QArch::Linear { fmap: fmap.clone() };
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let train = random_batch(&mut rng, 40, ds, na, false);
        let ens = sample_ensemble(&arch, ds, na, 6, arch.default_sigma(), rng.gen()).unwrap();
        let raw = synthetic(relaxed_batch(&mut rng, 9, ds, na, false, 1.5), TransitionBatch::new(
            DMatrix::zeros(0, ds), DMatrix::zeros(0, na), DVector::zeros(0), DMatrix::zeros(0, ds), vec![],
        ).unwrap(), (40, 0));
        let syn = mean_constraint_project(&raw, &train, &fmap).unwrap();
        let bell = BellmanMatcher::new(&train, ens.clone(), gamma).unwrap().objective(&syn).unwrap();

        let points = |b: &TransitionBatch| {
            let x = &b.s - &b.s_next * gamma;
            DMatrix::from_fn(b.len(), ds + na + 1, |i, j| {
                if j < ds {
                    x[(i, j)]
                } else if j < ds + na {
                    b.a[(i, j - ds)]
                } else {
                    b.r[i]
                }
            })
        };
        let regs = ens
            .iter()
            .map(|q: &QEnsembleSample| {
                let distillkit::nn::QPredictor::Linear { weights, .. } = &q.predictor else { unreachable!() };
                let mut w = weights.as_slice().to_vec();
                w.push(-q.lambda);
                LinearRegressor::new(DVector::from_vec(w))
            })
            .collect();
        let sup = LossMatcher::new(&points(&train), &RegressorEnsemble::from_regressors(regs).unwrap())
            .unwrap()
            .objective(&points(&syn.nonterminated))
            .unwrap();
        worst = worst.max((bell - sup).abs() / bell.abs().max(1.0));
    }
    Check { name: "linear Bellman matching reduces to supervised matching", worst, tol: 1e-9, cases: instances }
}

/// Two-state chain: `s0 → s1` with reward 0, then `s1` terminates with reward 1.
pub fn chain_batch() -> TransitionBatch {
    let rows = vec![
        Transition { s: vec![1.0, 0.0], a: 0, r: 0.0, s_next: vec![0.0, 1.0], terminated: false, truncated: false },
        Transition { s: vec![0.0, 1.0], a: 0, r: 1.0, s_next: vec![0.0, 1.0], terminated: true, truncated: false },
    ];
    let ds = distillkit::envs::OfflineRLDataset::custom("chain", 2, 1, 0.9, rows).unwrap();
    TransitionBatch::from(&ds)
}

/// Largest relative error of FQI's `Q(s0)` and `Q(s1)` against `(0.9, 1.0)` over `seeds` seeds.
pub fn fqi_chain(seeds: u64) -> Check {
    let batch = chain_batch();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let cfg = FQIConfig { gamma: 0.9, seed, ..FQIConfig::default() };
        let q = fqi_train(&batch, &cfg).unwrap();
        let a = one_hot(1, 0);
        let q0 = q.value(&DVector::from_vec(vec![1.0, 0.0]), &a).unwrap();
        let q1 = q.value(&DVector::from_vec(vec![0.0, 1.0]), &a).unwrap();
        worst = worst.max((q0 - 0.9).abs() / 0.9).max((q1 - 1.0).abs());
    }
    Check { name: "FQI chain fixed point", worst, tol: 0.05, cases: seeds as usize }
}

/// Objectives and residuals that must vanish exactly when synthetic equals training data.
pub fn zero_objective_cases() -> Check {
    let mut rng = rng_from_seed(1111);
    let mut worst = 0.0f64;
    let train = randn(&mut rng, 25, 4, 1.0);
    let ens = RegressorEnsemble::sample(20, 3, 5).unwrap();
    let matcher = LossMatcher::new(&train, &ens).unwrap();
    worst = worst.max(matcher.objective(&train).unwrap().abs());
    let perm = DMatrix::from_fn(25, 4, |i, j| train[(24 - i, j)]);
    worst = worst.max(matcher.objective(&perm).unwrap().abs());

    let (ds, na) = (3, 2);
    let nt = random_batch(&mut rng, 12, ds, na, false);
    let t = random_batch(&mut rng, 4, ds, na, true);
    let full = nt.vstack(&t).unwrap();
    for arch in [QArch::Mlp { hidden: (5, 5) }, QArch::Linear { fmap: FeatureMap::concat(ds, na) }] {
        let ens = sample_ensemble(&arch, ds, na, 5, arch.default_sigma(), 9).unwrap();
        let syn = synthetic(nt.clone(), t.clone(), (12, 4));
        worst = worst.max(BellmanMatcher::new(&full, ens, 0.9).unwrap().objective(&syn).unwrap().abs());
    }
    let syn = synthetic(nt.clone(), t.clone(), (12, 4));
    let res = mean_constraint_residual(&full, &syn, &FeatureMap::concat(ds, na)).unwrap();
    worst = worst.max(res.amax());
    Check { name: "zero objective at synthetic = training", worst, tol: 1e-12, cases: 5 }
}

/// Every property check at the sizes the acceptance run reports.
pub fn all_checks() -> Vec<Check> {
    vec![
        supervised_convexity(100),
        bellman_linear_convexity(100),
        supervised_gradient(10),
        network_gradients(20),
        bellman_gradient(10),
        moment_reduction(20, 100),
        leverage_rank(20),
        decomposable_identity(),
        supervised_equivalence(20),
        fqi_chain(5),
        zero_objective_cases(),
    ]
}
