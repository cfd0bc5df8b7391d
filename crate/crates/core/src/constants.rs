//! Empirical estimation of the Lyapunov, Lipschitz and contraction constants
//! of the coupled loop, and the derived constants and sampling-time bounds.
//!
//! All primitive estimators are extremal (min or max) over sampled data.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::certify::{self, AuxConstants};
use crate::coupled::{random_direction, PLANT_SUBSTEPS};
use crate::kv::KvFile;
use crate::ocp::{Iterate, OcpSpec};
use crate::optimizer::{self, RtiSettings};
use crate::plant::{self, PlantModel};
use crate::{linalg, Error, Result};

/// States closer to the origin than this are left out of ratio estimates.
pub const ORIGIN_EXCLUSION: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub x: DVector<f64>,
    pub v: f64,
    /// `z_bar(x)` in the full primal-dual layout.
    pub z: DVector<f64>,
    /// Index of the successor under the exact policy.
    pub next: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sampling_time: f64,
    pub points: Vec<DataPoint>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Chains of consecutive points with successor links, one chain per trajectory.
    pub fn from_trajectories(sampling_time: f64, trajectories: Vec<Vec<(DVector<f64>, f64, DVector<f64>)>>) -> Self {
        let mut points = Vec::new();
        for traj in trajectories {
            let start = points.len();
            let len = traj.len();
            for (i, (x, v, z)) in traj.into_iter().enumerate() {
                let next = (i + 1 < len).then_some(start + i + 1);
                points.push(DataPoint { x, v, z, next });
            }
        }
        Dataset { sampling_time, points }
    }
}

/// Rolls the exact-policy closed loop `u = u_0(z_bar(x))` from each initial
/// condition and records `V` and `z_bar` at every visited state.
pub fn sample_exact_trajectories(
    spec: &OcpSpec,
    settings: &RtiSettings,
    t: f64,
    x0_set: &[DVector<f64>],
    n_steps: usize,
) -> Result<Dataset> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("sampling time must be positive, got {t}")));
    }
    let trajectories = x0_set
        .par_iter()
        .map(|x0| {
            let mut out = Vec::with_capacity(n_steps + 1);
            let mut x = x0.clone();
            let mut oracle = optimizer::solve_cold(spec, &x, settings)?;
            for k in 0..=n_steps {
                out.push((x.clone(), oracle.v, oracle.z_bar.to_vector()));
                if k == n_steps {
                    break;
                }
                let u = optimizer::extract_control(&oracle.z_bar);
                x = plant::integrate(&spec.plant, &x, &u, t, PLANT_SUBSTEPS).map_err(|e| Error::at_step(k, e))?;
                oracle = optimizer::solve_converged(spec, &x, &oracle.z_bar, settings).map_err(|e| Error::at_step(k + 1, e))?;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_trajectories(t, trajectories))
}

/// Extremal value together with the dataset indices that attain it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extremum {
    pub value: f64,
    pub at: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovEstimates {
    pub a1: Extremum,
    pub a2: Extremum,
    pub a3: Extremum,
    pub v_bar: Extremum,
    pub mu_tilde: Extremum,
    pub pairs: usize,
}

/// Consecutive pairs followed by `n_random` random pairs, deterministic in `seed`.
fn ratio_pairs(data: &Dataset, n_random: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = data.points.iter().enumerate().filter_map(|(i, p)| p.next.map(|j| (i, j))).collect();
    let n = data.len();
    if n >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_random {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

pub fn estimate_lyapunov_constants(data: &Dataset, q: f64, n_random: usize, seed: u64) -> Result<LyapunovEstimates> {
    let usable: Vec<usize> = (0..data.len()).filter(|&i| data.points[i].x.norm() > ORIGIN_EXCLUSION).collect();
    if usable.is_empty() {
        return Err(Error::Estimation("no samples away from the origin".into()));
    }
    let mut a1 = Extremum { value: f64::INFINITY, at: (0, 0) };
    let mut a2 = Extremum { value: f64::NEG_INFINITY, at: (0, 0) };
    let mut a3 = Extremum { value: f64::INFINITY, at: (0, 0) };
    let mut v_bar = Extremum { value: f64::NEG_INFINITY, at: (0, 0) };
    for (i, p) in data.points.iter().enumerate() {
        if p.v > v_bar.value {
            v_bar = Extremum { value: p.v, at: (i, i) };
        }
    }
    for &i in &usable {
        let p = &data.points[i];
        let scale = p.x.norm().powf(q);
        let ratio = p.v / scale;
        if ratio < a1.value {
            a1 = Extremum { value: ratio, at: (i, i) };
        }
        if ratio > a2.value {
            a2 = Extremum { value: ratio, at: (i, i) };
        }
        if let Some(j) = p.next {
            let rate = (p.v - data.points[j].v) / (data.sampling_time * scale);
            if rate < a3.value {
                a3 = Extremum { value: rate, at: (i, j) };
            }
        }
    }
    if !a3.value.is_finite() {
        return Err(Error::Estimation("no linked pairs to estimate the decrease rate a3".into()));
    }
    if a3.value <= 0.0 {
        return Err(Error::Estimation(format!(
            "the exact policy does not decrease V on the data (a3 = {:e} at sample {}); scenario invalid",
            a3.value, a3.at.0
        )));
    }
    let pairs = ratio_pairs(data, n_random, seed);
    let mut mu_tilde = Extremum { value: 0.0, at: (0, 0) };
    for &(i, j) in &pairs {
        let (p, r) = (&data.points[i], &data.points[j]);
        let dx = (&p.x - &r.x).norm();
        if dx < 1e-10 {
            continue;
        }
        let ratio = (p.v.powf(1.0 / q) - r.v.powf(1.0 / q)).abs() / dx;
        if ratio > mu_tilde.value {
            mu_tilde = Extremum { value: ratio, at: (i, j) };
        }
    }
    Ok(LyapunovEstimates { a1, a2, a3, v_bar, mu_tilde, pairs: pairs.len() })
}

/// Lipschitz constant of `z_bar` over consecutive and random pairs.
pub fn estimate_sigma(data: &Dataset, n_random: usize, seed: u64) -> Extremum {
    let mut best = Extremum { value: 0.0, at: (0, 0) };
    for (i, j) in ratio_pairs(data, n_random, seed) {
        let (p, r) = (&data.points[i], &data.points[j]);
        let dx = (&p.x - &r.x).norm();
        if dx < 1e-10 {
            continue;
        }
        let ratio = (&p.z - &r.z).norm() / dx;
        if ratio > best.value {
            best = Extremum { value: ratio, at: (i, j) };
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaEstimate {
    pub kappa_hat: f64,
    /// Largest probe radius at which every post-transient ratio stayed below 1.
    pub r_hat_z: f64,
    /// State and radius of the largest ratio.
    pub worst_state: DVector<f64>,
    pub worst_radius: f64,
    pub ratios: usize,
}

/// Contraction probe for a generic fixed-parameter iteration `z+ = step(x, z)`.
///
/// Each `(x, z_bar)` is perturbed along a random direction at every radius
/// (ascending); `n_probe` iterations follow and successive error ratios after
/// the first are recorded. Errors below `floor` are too close to solver
/// precision and are skipped. Radii stop at the first one showing a ratio of at
/// least 1; that is an error if it happens at the smallest radius.
pub fn kappa_from_map<F>(
    step: F,
    samples: &[(DVector<f64>, DVector<f64>)],
    radii: &[f64],
    n_probe: usize,
    floor: f64,
    seed: u64,
) -> Result<KappaEstimate>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    if n_probe < 3 {
        return Err(Error::InvalidArgument("n_probe must be at least 3".into()));
    }
    if radii.is_empty() || radii.iter().any(|&r| !(r > 0.0)) || radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("probe radii must be positive and increasing".into()));
    }
    let mut result = KappaEstimate {
        kappa_hat: 0.0,
        r_hat_z: 0.0,
        worst_state: samples.first().map(|s| s.0.clone()).unwrap_or_default(),
        worst_radius: radii[0],
        ratios: 0,
    };
    for (level, &radius) in radii.iter().enumerate() {
        let per_sample: Vec<(f64, usize, usize)> = samples
            .par_iter()
            .enumerate()
            .map(|(index, (x, z_bar))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((level as u64) << 40) ^ index as u64);
                let mut z = z_bar + random_direction(z_bar.len(), &mut rng) * radius;
                let mut errors = vec![radius];
                for _ in 0..n_probe {
                    z = step(x, &z)?;
                    errors.push((&z - z_bar).norm());
                }
                let mut worst: f64 = 0.0;
                let mut count = 0;
                for w in errors[1..].windows(2) {
                    if w[0] < floor {
                        break;
                    }
                    worst = worst.max(w[1] / w[0]);
                    count += 1;
                }
                Ok((worst, count, index))
            })
            .collect::<Result<Vec<_>>>()?;
        let (worst, _, at) = per_sample.iter().cloned().fold((0.0, 0, 0), |a, b| if b.0 > a.0 { b } else { a });
        if worst >= 1.0 {
            if level == 0 {
                return Err(Error::ContractionViolation {
                    state: samples[at].0.as_slice().to_vec(),
                    radius,
                    ratio: worst,
                });
            }
            break;
        }
        result.ratios += per_sample.iter().map(|s| s.1).sum::<usize>();
        result.r_hat_z = radius;
        if worst > result.kappa_hat {
            result.kappa_hat = worst;
            result.worst_state = samples[at].0.clone();
            result.worst_radius = radius;
        }
    }
    Ok(result)
}

/// Contraction rate of the RTI step on the OCP, probed around dataset states.
pub fn estimate_kappa_hat(
    spec: &OcpSpec,
    settings: &RtiSettings,
    samples: &[(DVector<f64>, DVector<f64>)],
    radii: &[f64],
    n_probe: usize,
    seed: u64,
) -> Result<KappaEstimate> {
    let primal = spec.n_primal();
    let step = |x: &DVector<f64>, z: &DVector<f64>| -> Result<DVector<f64>> {
        let next = optimizer::rti_step(spec, x, &Iterate::from_vector(spec, z)?, settings)?.to_vector();
        Ok(next)
    };
    if settings.primal_only_error {
        // compare over the primal block only by zeroing multipliers on both sides
        let mask = |v: &DVector<f64>| DVector::from_fn(v.len(), |i, _| if i < primal { v[i] } else { 0.0 });
        let masked: Vec<_> = samples.iter().map(|(x, z)| (x.clone(), mask(z))).collect();
        let masked_step = |x: &DVector<f64>, z: &DVector<f64>| step(x, z).map(|n| mask(&n));
        return kappa_from_map(masked_step, &masked, radii, n_probe, 1e-9, seed);
    }
    kappa_from_map(step, samples, radii, n_probe, 1e-9, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedCheck {
    /// Largest radius with every check passing.
    pub r_hat_x: f64,
    pub checks: usize,
    /// Smallest slack `bound - lhs` seen at accepted radii.
    pub worst_margin: f64,
}

/// Largest `|x' - x|` at which one RTI step satisfies
/// `|z+ - z_bar(x')| <= kappa_hat |z - z_bar(x)| + sigma kappa_hat |x' - x|`.
///
/// The start iterate `z` is taken one fixed-`x` step after a random
/// perturbation of size `z_radius`, so the check sees the post-transient error.
/// `kappa_hat` and `sigma` are inflated by `slack`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_r_hat_x(
    spec: &OcpSpec,
    settings: &RtiSettings,
    samples: &[(DVector<f64>, DVector<f64>)],
    x_radii: &[f64],
    z_radius: f64,
    kappa_hat: f64,
    sigma: f64,
    slack: f64,
    seed: u64,
) -> Result<PerturbedCheck> {
    if x_radii.is_empty() || x_radii.windows(2).any(|w| w[0] >= w[1]) || x_radii[0] <= 0.0 {
        return Err(Error::InvalidArgument("x probe radii must be positive and increasing".into()));
    }
    let k = kappa_hat * (1.0 + slack);
    let s = sigma * (1.0 + slack);
    let mut out = PerturbedCheck { r_hat_x: 0.0, checks: 0, worst_margin: f64::INFINITY };
    for (level, &radius) in x_radii.iter().enumerate() {
        let margins: Vec<f64> = samples
            .par_iter()
            .enumerate()
            .map(|(index, (x, z_bar_vec))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((level as u64) << 40) ^ index as u64);
                let z_bar = Iterate::from_vector(spec, z_bar_vec)?;
                let perturbed = Iterate::from_vector(spec, &(z_bar_vec + random_direction(z_bar_vec.len(), &mut rng) * z_radius))?;
                let z = optimizer::rti_step(spec, x, &perturbed, settings)?;
                let x_new = x + random_direction(x.len(), &mut rng) * radius;
                let bar_new = optimizer::solve_converged(spec, &x_new, &z_bar, settings)?.z_bar;
                let z_next = optimizer::rti_step(spec, &x_new, &z, settings)?;
                let lhs = settings.error(&z_next, &bar_new);
                let bound = k * settings.error(&z, &z_bar) + s * k * radius;
                Ok(bound - lhs)
            })
            .collect::<Result<Vec<_>>>()?;
        let worst = margins.iter().cloned().fold(f64::INFINITY, f64::min);
        if worst < 0.0 {
            break;
        }
        out.r_hat_x = radius;
        out.checks += margins.len();
        out.worst_margin = out.worst_margin.min(worst);
    }
    if out.r_hat_x == 0.0 {
        return Err(Error::Estimation(format!(
            "perturbed contraction bound fails already at |x' - x| = {:e}",
            x_radii[0]
        )));
    }
    Ok(out)
}

/// Largest Jacobian operator norms of the plant over `|x| <= radius` and the input box.
pub fn estimate_plant_lipschitz(
    model: &PlantModel,
    radius: f64,
    u_lo: &DVector<f64>,
    u_hi: &DVector<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let (nx, nu) = (model.nx(), model.nu());
    let norms = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let r = radius * rng.random::<f64>().powf(1.0 / nx as f64);
            let x = random_direction(nx, &mut rng) * r;
            let u = DVector::from_fn(nu, |j, _| rng.random_range(u_lo[j]..=u_hi[j]));
            let (a, b) = plant::evaluate_jacobians(model, &x, &u)?;
            Ok((linalg::op_norm(&a), linalg::op_norm(&b)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(norms.iter().fold((0.0f64, 0.0f64), |acc, n| (acc.0.max(n.0), acc.1.max(n.1))))
}

/// Primitive estimates from which every other constant is derived.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitives {
    pub q: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub v_bar: f64,
    pub mu_tilde: f64,
    pub sigma: f64,
    pub kappa_hat: f64,
    pub l_phi_x: f64,
    pub l_phi_u: f64,
    pub r_hat_x: f64,
    pub r_hat_z: f64,
    pub nx: usize,
    pub nz: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsBundle {
    pub q: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub v_bar: f64,
    pub mu_tilde: f64,
    pub sigma: f64,
    pub kappa_hat: f64,
    pub l_phi_x: f64,
    pub l_phi_u: f64,
    pub t1_horizon: f64,
    pub r_hat_x: f64,
    pub r_hat_z: f64,
    pub nx: usize,
    pub nz: usize,

    pub l_psi_x: f64,
    pub l_psi_u: f64,
    pub eta: f64,
    pub theta: f64,
    pub r_x: f64,
    pub r_z: f64,
    pub r_tilde_z: f64,
    pub r_vbar: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub gamma_hat: f64,
    pub a_bar: f64,
    pub l_v: f64,
    pub mu: f64,
    pub mu_hat: f64,
    pub beta: f64,
    pub t3p: f64,
    pub t3: f64,
    pub t4p: f64,
    pub t4: f64,
    pub t5: f64,
    pub t_max: f64,

    /// Sample counts, seeds and settings behind the estimates.
    pub provenance: Vec<(String, f64)>,
}

/// Fills every derived constant from the primitives.
pub fn derive_bundle(p: &Primitives, t1_horizon: f64) -> Result<ConstantsBundle> {
    let positive = [
        ("q", p.q),
        ("a1", p.a1),
        ("a2", p.a2),
        ("a3", p.a3),
        ("V_bar", p.v_bar),
        ("r_hat_x", p.r_hat_x),
        ("r_hat_z", p.r_hat_z),
        ("T1_horizon", t1_horizon),
    ];
    for (name, v) in positive {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Estimation(format!("{name} must be positive and finite, got {v}")));
        }
    }
    for (name, v) in [("mu_tilde", p.mu_tilde), ("sigma", p.sigma), ("L_phi_x", p.l_phi_x), ("L_phi_u", p.l_phi_u)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Estimation(format!("{name} must be nonnegative and finite, got {v}")));
        }
    }
    if p.a1 > p.a2 {
        return Err(Error::Estimation(format!("a1 = {} exceeds a2 = {}", p.a1, p.a2)));
    }
    if !(p.kappa_hat >= 0.0 && p.kappa_hat < 1.0) {
        return Err(Error::Estimation(format!("kappa_hat = {} is not a contraction rate", p.kappa_hat)));
    }
    let inv_q = 1.0 / p.q;
    let growth = (p.l_phi_x * t1_horizon).exp();
    let l_psi_x = growth * p.l_phi_x;
    let l_psi_u = growth * p.l_phi_u;
    let eta = l_psi_x + l_psi_u * p.sigma;
    let theta = l_psi_u;
    let r_vbar = (p.v_bar / p.a1).powf(inv_q);
    let r_x = p.r_hat_x;
    let r_z = (p.r_hat_z - p.sigma * r_x).max(0.1 * p.r_hat_z);
    let a_bar = p.a3 / p.a2;
    let l_v = 2.0 * p.v_bar.powf(inv_q) * p.mu_tilde;
    let mu = l_v * l_psi_u;
    let mu_hat = p.l_phi_u * growth * p.mu_tilde;
    let r_tilde_z = if mu > 0.0 { r_z.min(a_bar * p.v_bar / mu) } else { r_z };

    let first = r_x / (eta * r_vbar + theta * r_z);
    let denom = p.sigma * p.kappa_hat * (theta * r_z + eta * r_vbar);
    let second = if denom > 0.0 { r_z * (1.0 - p.kappa_hat) / denom } else { f64::INFINITY };
    let t3p = first.min(second);
    let t3 = t3p.min(t1_horizon);
    let kappa = p.kappa_hat * (1.0 + t3 * p.sigma * theta);
    if kappa >= 1.0 {
        return Err(Error::Estimation(format!("inflated contraction rate kappa = {kappa} is not below 1")));
    }
    let gamma = p.sigma * p.kappa_hat * eta;
    let gamma_hat = gamma / p.a1.powf(inv_q);
    let aux = AuxConstants { q: p.q, a_bar, kappa, gamma_hat, mu_hat, reported_t5: None, reported_beta: None };
    let beta = certify::compute_beta(&aux).unwrap_or(f64::INFINITY);
    let t4p = if gamma > 0.0 {
        (1.0 - kappa) * r_tilde_z * p.a1.powf(inv_q) / (p.v_bar.powf(inv_q) * gamma)
    } else {
        f64::INFINITY
    };
    let t4 = t4p.min(t3);
    let t5 = certify::t5(&aux);
    Ok(ConstantsBundle {
        q: p.q,
        a1: p.a1,
        a2: p.a2,
        a3: p.a3,
        v_bar: p.v_bar,
        mu_tilde: p.mu_tilde,
        sigma: p.sigma,
        kappa_hat: p.kappa_hat,
        l_phi_x: p.l_phi_x,
        l_phi_u: p.l_phi_u,
        t1_horizon,
        r_hat_x: p.r_hat_x,
        r_hat_z: p.r_hat_z,
        nx: p.nx,
        nz: p.nz,
        l_psi_x,
        l_psi_u,
        eta,
        theta,
        r_x,
        r_z,
        r_tilde_z,
        r_vbar,
        kappa,
        gamma,
        gamma_hat,
        a_bar,
        l_v,
        mu,
        mu_hat,
        beta,
        t3p,
        t3,
        t4p,
        t4,
        t5,
        t_max: t4.min(t5),
        provenance: Vec::new(),
    })
}

const PRIMITIVE_KEYS: [&str; 15] = [
    "q", "a1", "a2", "a3", "V_bar", "mu_tilde", "sigma", "kappa_hat", "L_phi_x", "L_phi_u", "T1_horizon", "r_hat_x",
    "r_hat_z", "nx", "nz",
];

impl ConstantsBundle {
    pub fn primitives(&self) -> Primitives {
        Primitives {
            q: self.q,
            a1: self.a1,
            a2: self.a2,
            a3: self.a3,
            v_bar: self.v_bar,
            mu_tilde: self.mu_tilde,
            sigma: self.sigma,
            kappa_hat: self.kappa_hat,
            l_phi_x: self.l_phi_x,
            l_phi_u: self.l_phi_u,
            r_hat_x: self.r_hat_x,
            r_hat_z: self.r_hat_z,
            nx: self.nx,
            nz: self.nz,
        }
    }

    pub fn aux(&self) -> AuxConstants {
        AuxConstants {
            q: self.q,
            a_bar: self.a_bar,
            kappa: self.kappa,
            gamma_hat: self.gamma_hat,
            mu_hat: self.mu_hat,
            reported_t5: None,
            reported_beta: None,
        }
    }

    fn derived_fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("L_psi_x", self.l_psi_x),
            ("L_psi_u", self.l_psi_u),
            ("eta", self.eta),
            ("theta", self.theta),
            ("r_x", self.r_x),
            ("r_z", self.r_z),
            ("r_tilde_z", self.r_tilde_z),
            ("r_Vbar", self.r_vbar),
            ("kappa", self.kappa),
            ("gamma", self.gamma),
            ("gamma_hat", self.gamma_hat),
            ("a_bar", self.a_bar),
            ("L_V", self.l_v),
            ("mu", self.mu),
            ("mu_hat", self.mu_hat),
            ("beta", self.beta),
            ("T3p", self.t3p),
            ("T3", self.t3),
            ("T4p", self.t4p),
            ("T4", self.t4),
            ("T5", self.t5),
            ("T_max", self.t_max),
        ]
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.comment("constants bundle: primitives first, derived constants after");
        let values = [
            self.q,
            self.a1,
            self.a2,
            self.a3,
            self.v_bar,
            self.mu_tilde,
            self.sigma,
            self.kappa_hat,
            self.l_phi_x,
            self.l_phi_u,
            self.t1_horizon,
            self.r_hat_x,
            self.r_hat_z,
            self.nx as f64,
            self.nz as f64,
        ];
        for (k, v) in PRIMITIVE_KEYS.iter().zip(values) {
            kv.set(k, v);
        }
        for (k, v) in self.derived_fields() {
            kv.set(k, v);
        }
        for (k, v) in &self.provenance {
            kv.set(&format!("provenance.{k}"), *v);
        }
        kv
    }

    /// Reads the primitives and recomputes the rest; stored derived values
    /// that disagree with the recomputation are rejected.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let g = |k: &str| kv.require(k);
        let count = |k: &str| -> Result<usize> {
            let v = g(k)?;
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse { line: 0, msg: format!("`{k}` must be a nonnegative integer") })
            }
        };
        let p = Primitives {
            q: g("q")?,
            a1: g("a1")?,
            a2: g("a2")?,
            a3: g("a3")?,
            v_bar: g("V_bar")?,
            mu_tilde: g("mu_tilde")?,
            sigma: g("sigma")?,
            kappa_hat: g("kappa_hat")?,
            l_phi_x: g("L_phi_x")?,
            l_phi_u: g("L_phi_u")?,
            r_hat_x: g("r_hat_x")?,
            r_hat_z: g("r_hat_z")?,
            nx: count("nx")?,
            nz: count("nz")?,
        };
        let mut bundle = derive_bundle(&p, g("T1_horizon")?)?;
        for (k, v) in bundle.derived_fields() {
            if let Some(stored) = kv.get(k) {
                let same = stored == v || (stored - v).abs() <= 1e-12 * v.abs().max(stored.abs());
                if !same {
                    return Err(Error::Inconsistent(format!("stored {k} = {stored:e} but the primitives give {v:e}")));
                }
            }
        }
        bundle.provenance = kv
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("provenance.").map(|s| (s.to_string(), *v)))
            .collect();
        Ok(bundle)
    }

    pub fn provenance_value(&self, key: &str) -> Option<f64> {
        self.provenance.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

/// Settings of the full estimation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationConfig {
    pub sampling_time: f64,
    pub initial_conditions: Vec<DVector<f64>>,
    pub n_steps: usize,
    pub q: f64,
    pub t1_horizon: f64,
    /// Inflation radius of the sampled level set for the plant Lipschitz constants.
    pub rho: f64,
    pub kappa_radii: Vec<f64>,
    pub x_radii: Vec<f64>,
    pub n_probe: usize,
    /// Every `probe_stride`-th dataset state is probed for contraction.
    pub probe_stride: usize,
    pub random_pairs: usize,
    pub lipschitz_samples: usize,
    pub slack: f64,
    pub seed: u64,
}

impl EstimationConfig {
    /// Chen scenario defaults.
    pub fn chen_default() -> Self {
        EstimationConfig {
            sampling_time: 0.0012,
            initial_conditions: chen_initial_conditions(),
            n_steps: 2500,
            q: 2.0,
            t1_horizon: 0.01,
            rho: 0.1,
            kappa_radii: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            x_radii: vec![1e-4, 2e-4, 5e-4, 1e-3, 1.5e-3, 2e-3, 3e-3, 4e-3, 5e-3, 7e-3, 1e-2, 2e-2],
            n_probe: 4,
            probe_stride: 10,
            random_pairs: 10_000,
            lipschitz_samples: 4096,
            slack: certify::AUDIT_SLACK,
            seed: 2024,
        }
    }
}

/// Six start states of the Chen scenario.
pub fn chen_initial_conditions() -> Vec<DVector<f64>> {
    [[0.06, 0.05], [-0.05, -0.06], [0.08, 0.07], [-0.09, -0.1], [0.012, -0.008], [-0.008, 0.012]]
        .iter()
        .map(|x| DVector::from_vec(x.to_vec()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EstimationReport {
    pub bundle: ConstantsBundle,
    pub dataset: Dataset,
    pub lyapunov: LyapunovEstimates,
    pub sigma: Extremum,
    pub kappa: KappaEstimate,
    pub perturbed: PerturbedCheck,
}

/// Runs every estimator on exact-policy data and derives the bundle.
pub fn estimate_all(spec: &OcpSpec, settings: &RtiSettings, cfg: &EstimationConfig) -> Result<EstimationReport> {
    settings.validate()?;
    if cfg.initial_conditions.is_empty() {
        return Err(Error::InvalidArgument("at least one initial condition is needed".into()));
    }
    if cfg.probe_stride == 0 {
        return Err(Error::InvalidArgument("probe_stride must be at least 1".into()));
    }
    let dataset = sample_exact_trajectories(spec, settings, cfg.sampling_time, &cfg.initial_conditions, cfg.n_steps)?;
    let lyapunov = estimate_lyapunov_constants(&dataset, cfg.q, cfg.random_pairs, cfg.seed)?;
    let sigma = estimate_sigma(&dataset, cfg.random_pairs, cfg.seed.wrapping_add(1));

    let samples: Vec<(DVector<f64>, DVector<f64>)> = dataset
        .points
        .iter()
        .step_by(cfg.probe_stride)
        .filter(|p| p.x.norm() > ORIGIN_EXCLUSION)
        .map(|p| (p.x.clone(), p.z.clone()))
        .collect();
    let kappa = estimate_kappa_hat(spec, settings, &samples, &cfg.kappa_radii, cfg.n_probe, cfg.seed.wrapping_add(2))?;

    let r_vbar = (lyapunov.v_bar.value / lyapunov.a1.value).powf(1.0 / cfg.q);
    let (l_phi_x, l_phi_u) = estimate_plant_lipschitz(
        &spec.plant,
        r_vbar + cfg.rho,
        &spec.u_lo,
        &spec.u_hi,
        cfg.lipschitz_samples,
        cfg.seed.wrapping_add(3),
    )?;
    let perturbed = estimate_r_hat_x(
        spec,
        settings,
        &samples,
        &cfg.x_radii,
        0.5 * kappa.r_hat_z,
        kappa.kappa_hat,
        sigma.value,
        cfg.slack,
        cfg.seed.wrapping_add(4),
    )?;

    let primitives = Primitives {
        q: cfg.q,
        a1: lyapunov.a1.value,
        a2: lyapunov.a2.value,
        a3: lyapunov.a3.value,
        v_bar: lyapunov.v_bar.value,
        mu_tilde: lyapunov.mu_tilde.value,
        sigma: sigma.value,
        kappa_hat: kappa.kappa_hat,
        l_phi_x,
        l_phi_u,
        r_hat_x: perturbed.r_hat_x,
        r_hat_z: kappa.r_hat_z,
        nx: spec.nx(),
        nz: spec.n_z(),
    };
    let mut bundle = derive_bundle(&primitives, cfg.t1_horizon)?;
    bundle.provenance = vec![
        ("sampling_time".into(), cfg.sampling_time),
        ("seed".into(), cfg.seed as f64),
        ("dataset_points".into(), dataset.len() as f64),
        ("trajectories".into(), cfg.initial_conditions.len() as f64),
        ("steps_per_trajectory".into(), cfg.n_steps as f64),
        ("ratio_pairs".into(), lyapunov.pairs as f64),
        ("probe_states".into(), samples.len() as f64),
        ("probe_stride".into(), cfg.probe_stride as f64),
        ("n_probe".into(), cfg.n_probe as f64),
        ("kappa_ratios".into(), kappa.ratios as f64),
        ("perturbed_checks".into(), perturbed.checks as f64),
        ("lipschitz_samples".into(), cfg.lipschitz_samples as f64),
        ("rho".into(), cfg.rho),
        ("slack".into(), cfg.slack),
        ("lm_shift".into(), settings.lm_shift),
        ("kkt_tol".into(), settings.kkt_tol),
        ("primal_only_error".into(), if settings.primal_only_error { 1.0 } else { 0.0 }),
    ];
    Ok(EstimationReport { bundle, dataset, lyapunov, sigma, kappa, perturbed })
}
