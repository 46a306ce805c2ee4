//! Exact ground-truth infection probabilities on small networks.
//!
//! Two independent exact methods are provided for the exponential model: the
//! full 2^n-state continuous-time Markov chain (Kolmogorov forward
//! equations) and the equivalent moment closure on first moments plus
//! centered higher moments. A seeded Monte Carlo estimator covers larger
//! networks and non-exponential models. These are the reference oracles the
//! rest of the crate is validated against.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::cascade::{shortest_path_times, simulate_cascade, DelayModel};
use crate::graph::DirectedNetwork;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Fixed RK4 step used by both integrators.
pub const DEFAULT_RK4_STEP: f64 = 1e-2;

/// Largest n for the 2^n-state chain.
pub const CTMC_MAX_NODES: usize = 14;
/// Largest n for the moment system.
pub const MOMENT_MAX_NODES: usize = 12;

fn require_exponential(model: &DelayModel) -> Result<()> {
    match model {
        DelayModel::Exponential => Ok(()),
        _ => Err(Error::Unsupported(
            "exact oracles are defined for the exponential model only; use the \
             Monte Carlo estimator for other delay models"
                .into(),
        )),
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("time grid is empty".into()));
    }
    if grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidArgument("grid times must be finite and nonnegative".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("grid times must be nondecreasing".into()));
    }
    Ok(())
}

fn source_mask(n: usize, source: &[usize]) -> Result<usize> {
    let mut mask = 0usize;
    for &s in source {
        if s >= n {
            return Err(Error::InvalidArgument(format!("source node {s} out of range")));
        }
        mask |= 1 << s;
    }
    Ok(mask)
}

/// Classic fixed-step RK4 over `[t0, t1]` split into `steps` equal pieces.
fn rk4_advance<F: Scalar>(
    y: &mut Array1<F>,
    deriv: &mut impl FnMut(&Array1<F>, &mut Array1<F>),
    span: f64,
    steps: usize,
) {
    if steps == 0 {
        return;
    }
    let h = F::of(span / steps as f64);
    let half = F::of(0.5);
    let sixth = F::of(1.0 / 6.0);
    let two = F::of(2.0);
    let dim = y.len();
    let mut k1 = Array1::zeros(dim);
    let mut k2 = Array1::zeros(dim);
    let mut k3 = Array1::zeros(dim);
    let mut k4 = Array1::zeros(dim);
    let mut tmp = Array1::zeros(dim);
    for _ in 0..steps {
        deriv(y, &mut k1);
        for i in 0..dim {
            tmp[i] = y[i] + half * h * k1[i];
        }
        deriv(&tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = y[i] + half * h * k2[i];
        }
        deriv(&tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = y[i] + h * k3[i];
        }
        deriv(&tmp, &mut k4);
        for i in 0..dim {
            y[i] += h * sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
        }
    }
}

fn substeps(span: f64, step: f64) -> usize {
    if span <= 0.0 {
        0
    } else {
        (span / step).ceil().max(1.0) as usize
    }
}

/// Rate at which node `i` (not in `mask`) gets infected given the infected
/// set `mask`: the summed rates of its infected in-neighbors.
pub fn infection_rate_into(a: &Array2<f64>, mask: usize, i: usize) -> f64 {
    let mut r = 0.0;
    let mut m = mask;
    while m != 0 {
        let j = m.trailing_zeros() as usize;
        r += a[[i, j]];
        m &= m - 1;
    }
    r
}

/// Marginal infection probabilities from the exact 2^n-state chain, one row
/// per grid time. Exponential model only; `n <= 14`.
pub fn ctmc_marginals<F: Scalar>(
    net: &DirectedNetwork,
    model: &DelayModel,
    source: &[usize],
    grid: &[f64],
) -> Result<Array2<F>> {
    ctmc_marginals_with_step(net, model, source, grid, DEFAULT_RK4_STEP)
}

pub fn ctmc_marginals_with_step<F: Scalar>(
    net: &DirectedNetwork,
    model: &DelayModel,
    source: &[usize],
    grid: &[f64],
    step: f64,
) -> Result<Array2<F>> {
    require_exponential(model)?;
    validate_grid(grid)?;
    let n = net.node_count();
    if n > CTMC_MAX_NODES {
        return Err(Error::Unsupported(format!(
            "chain oracle limited to n <= {CTMC_MAX_NODES}, got {n}"
        )));
    }
    let a = net.rate_matrix();
    let states = 1usize << n;
    // in_rate[c * n + i]: rate of adding node i given infected set c.
    let mut in_rate = vec![F::zero(); states * n];
    for c in 1..states {
        let low = c.trailing_zeros() as usize;
        let rest = c & (c - 1);
        for i in 0..n {
            in_rate[c * n + i] = in_rate[rest * n + i] + F::of(a[[i, low]]);
        }
    }
    let mut out_rate = vec![F::zero(); states];
    for c in 0..states {
        let mut r = F::zero();
        for i in 0..n {
            if c & (1 << i) == 0 {
                r += in_rate[c * n + i];
            }
        }
        out_rate[c] = r;
    }

    let mask = source_mask(n, source)?;
    let mut p: Array1<F> = Array1::zeros(states);
    p[mask] = F::one();

    let mut deriv = |y: &Array1<F>, dy: &mut Array1<F>| {
        dy.fill(F::zero());
        for c in 0..states {
            let pc = y[c];
            if pc == F::zero() {
                continue;
            }
            dy[c] -= pc * out_rate[c];
            for i in 0..n {
                let bit = 1 << i;
                if c & bit == 0 {
                    let r = in_rate[c * n + i];
                    if r != F::zero() {
                        dy[c | bit] += pc * r;
                    }
                }
            }
        }
    };

    let mut out = Array2::zeros((grid.len(), n));
    let mut t = 0.0;
    let tol = F::of(1e-8);
    for (row, &target) in grid.iter().enumerate() {
        rk4_advance(&mut p, &mut deriv, target - t, substeps(target - t, step));
        t = target;
        let total: F = p.iter().copied().sum();
        if (total - F::one()).abs() > tol {
            return Err(Error::NonFinite {
                step: row,
                what: format!("chain probability mass drifted to {total}"),
            });
        }
        for i in 0..n {
            let mut xi = F::zero();
            for c in 0..states {
                if c & (1 << i) != 0 {
                    xi += p[c];
                }
            }
            out[[row, i]] = xi;
        }
    }
    Ok(out)
}

/// Marginals from the closed moment system on `z = [x; e]`, where `e_I` are
/// the centered moments of every subset `|I| >= 2`. Algebraically equivalent
/// to the full chain for the exponential model; `n <= 12`.
///
/// The evolution used here is derived from the conditional intensities:
/// `x_I' = sum_{i in I} sum_{j != i} a_{ji} (x_{(I\{i}) + {j}} - x_{I + {j}})`
/// and `e_I' = x_I' - sum_{i in I} y_{I\{i}} x_i'` with
/// `x_i' = sum_j a_{ji} (x_j - x_i x_j - e_{ij})`.
pub fn moment_system_marginals<F: Scalar>(
    net: &DirectedNetwork,
    model: &DelayModel,
    source: &[usize],
    grid: &[f64],
) -> Result<Array2<F>> {
    moment_system_marginals_with_step(net, model, source, grid, DEFAULT_RK4_STEP)
}

pub fn moment_system_marginals_with_step<F: Scalar>(
    net: &DirectedNetwork,
    model: &DelayModel,
    source: &[usize],
    grid: &[f64],
    step: f64,
) -> Result<Array2<F>> {
    require_exponential(model)?;
    validate_grid(grid)?;
    let n = net.node_count();
    if n > MOMENT_MAX_NODES {
        return Err(Error::Unsupported(format!(
            "moment oracle limited to n <= {MOMENT_MAX_NODES}, got {n}"
        )));
    }
    let states = 1usize << n;
    let a = {
        let af = net.rate_matrix();
        Array2::from_shape_fn((n, n), |(i, j)| F::of(af[[i, j]]))
    };
    let mask = source_mask(n, source)?;

    // State layout: z[0..n] = x, z[n + m] = e over masks m (entries with
    // popcount < 2 stay zero and are ignored).
    let mut z: Array1<F> = Array1::zeros(n + states);
    for i in 0..n {
        if mask & (1 << i) != 0 {
            z[i] = F::one();
        }
    }

    let mut y = vec![F::zero(); states]; // products prod_{i in m} x_i
    let mut xdot = vec![F::zero(); n];
    let mut deriv = move |zv: &Array1<F>, dz: &mut Array1<F>| {
        dz.fill(F::zero());
        let x = |i: usize| zv[i];
        let e = |m: usize| zv[n + m];
        y[0] = F::one();
        for m in 1..states {
            let low = m.trailing_zeros() as usize;
            y[m] = y[m & (m - 1)] * x(low);
        }
        // Raw moment of an index set: x for singletons, y + e above.
        let xm = |m: usize| -> F {
            if m.count_ones() == 1 {
                x(m.trailing_zeros() as usize)
            } else {
                y[m] + e(m)
            }
        };
        for i in 0..n {
            let mut d = F::zero();
            for j in 0..n {
                if j != i {
                    let aji = a[[i, j]];
                    if aji != F::zero() {
                        d += aji * (x(j) - x(i) * x(j) - e((1 << i) | (1 << j)));
                    }
                }
            }
            xdot[i] = d;
            dz[i] = d;
        }
        for m in 0..states {
            if m.count_ones() < 2 {
                continue;
            }
            let mut raw = F::zero(); // x_I'
            let mut prod = F::zero(); // y_I'
            let mut rem = m;
            while rem != 0 {
                let i = rem.trailing_zeros() as usize;
                rem &= rem - 1;
                let without = m & !(1 << i);
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let aji = a[[i, j]];
                    if aji != F::zero() {
                        let gained = without | (1 << j);
                        let joined = m | (1 << j);
                        raw += aji * (xm(gained) - xm(joined));
                    }
                }
                prod += y[without] * xdot[i];
            }
            dz[n + m] = raw - prod;
        }
    };

    let mut out = Array2::zeros((grid.len(), n));
    let mut t = 0.0;
    for (row, &target) in grid.iter().enumerate() {
        rk4_advance(&mut z, &mut deriv, target - t, substeps(target - t, step));
        t = target;
        for i in 0..n {
            out[[row, i]] = z[i];
        }
    }
    Ok(out)
}

/// Monte Carlo marginals: the mean over `num_samples` simulated cascades of
/// the indicator `time_i <= t`, one row per grid time, with per-entry
/// standard errors (`None` when `num_samples == 1`). Samples run on
/// independent substreams of `seed` and are reduced in fixed chunk order, so
/// the result does not depend on thread scheduling.
pub fn mc_marginals(
    net: &DirectedNetwork,
    model: &DelayModel,
    source: &[usize],
    grid: &[f64],
    num_samples: usize,
    seed: u64,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    validate_grid(grid)?;
    if num_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let n = net.node_count();
    source_mask(n, source)?;
    let horizon = grid.last().copied().unwrap_or(0.0);
    const CHUNK: usize = 1024;
    let chunk_sums: Result<Vec<Array2<f64>>> = (0..num_samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(num_samples);
            let mut acc = Array2::<f64>::zeros((grid.len(), n));
            for s in lo..hi {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream(1 + s as u64);
                let c = simulate_cascade(net, model, source, horizon, &mut rng)?;
                for (row, &t) in grid.iter().enumerate() {
                    for i in 0..n {
                        if c.times[i] <= t {
                            acc[[row, i]] += 1.0;
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut mean = Array2::<f64>::zeros((grid.len(), n));
    for acc in chunk_sums? {
        mean += &acc;
    }
    mean.mapv_inplace(|v| v / num_samples as f64);
    let se = (num_samples > 1).then(|| {
        // Indicator samples: the sample variance is p(1-p) * N / (N-1).
        let n_f = num_samples as f64;
        mean.mapv(|p| (p * (1.0 - p) / (n_f - 1.0)).sqrt())
    });
    Ok((mean, se))
}

/// Influence at one grid row: the summed infection probabilities.
pub fn influence<F: Scalar>(marginals_at_t: &[F]) -> F {
    marginals_at_t.iter().copied().sum()
}

/// Exact influence via the chain oracle, for tiny networks.
pub fn ctmc_influence(net: &DirectedNetwork, source: &[usize], t: f64) -> Result<f64> {
    let m: Array2<f64> = ctmc_marginals(net, &DelayModel::Exponential, source, &[t])?;
    Ok(m.row(0).sum())
}

/// Monte Carlo influence of a source set at time `t`, with standard error.
/// Fresh substreams per sample; deterministic for a fixed seed.
pub fn mc_influence(
    net: &DirectedNetwork,
    model: &DelayModel,
    source: &[usize],
    t: f64,
    num_samples: usize,
    seed: u64,
) -> Result<(f64, Option<f64>)> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("source set must be nonempty".into()));
    }
    let n = net.node_count();
    const CHUNK: usize = 1024;
    let chunk_sums: Result<Vec<(f64, f64)>> = (0..num_samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(num_samples);
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for s in lo..hi {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream(1 + s as u64);
                let c = simulate_cascade(net, model, source, t, &mut rng)?;
                let infected = c.times.iter().filter(|&&tau| tau <= t).count() as f64;
                s1 += infected;
                s2 += infected * infected;
            }
            Ok((s1, s2))
        })
        .collect();
    let (mut s1, mut s2) = (0.0, 0.0);
    for (a, b) in chunk_sums? {
        s1 += a;
        s2 += b;
    }
    let n_f = num_samples as f64;
    let mean = s1 / n_f;
    let se = (num_samples > 1).then(|| {
        let var = ((s2 - n_f * mean * mean) / (n_f - 1.0)).max(0.0);
        (var / n_f).sqrt()
    });
    let _ = n;
    Ok((mean, se))
}

/// Influence of a source set at time `t` under frozen per-edge delays drawn
/// once per sample (common random numbers): the estimate is an average of
/// deterministic coverage functions of the source set, hence monotone and
/// submodular exactly. Used by the greedy maximizer.
pub struct FrozenDelayInfluence {
    net: DirectedNetwork,
    delays: Vec<Vec<f64>>,
    pub horizon: f64,
}

impl FrozenDelayInfluence {
    pub fn new(
        net: &DirectedNetwork,
        model: &DelayModel,
        horizon: f64,
        num_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_samples == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        let delays = (0..num_samples)
            .map(|s| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream(1 + s as u64);
                net.edges()
                    .iter()
                    .enumerate()
                    .map(|(idx, e)| model.sample_delay(e.alpha, idx, &mut rng))
                    .collect()
            })
            .collect();
        Ok(Self { net: net.clone(), delays, horizon })
    }

    pub fn node_count(&self) -> usize {
        self.net.node_count()
    }

    /// sigma(t; S) averaged over the frozen delay realizations.
    pub fn influence(&self, source: &[usize], t: f64) -> f64 {
        if source.is_empty() {
            return 0.0;
        }
        let total: usize = self
            .delays
            .par_iter()
            .map(|d| {
                shortest_path_times(&self.net, d, source, t)
                    .iter()
                    .filter(|&&tau| tau <= t)
                    .count()
            })
            .sum();
        total as f64 / self.delays.len() as f64
    }
}
