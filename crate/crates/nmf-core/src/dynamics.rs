//! The neural mean-field recurrence.
//!
//! One step carries the infection-probability vector forward by the
//! mean-field drift `f(x; A)_i = (1 - x_i) * (A x)_i` plus a learned
//! correction read off the current state and a memory of past states:
//!
//! ```text
//! x_{t+1} = clamp(x_t + f(x_t; A) + eps(x_t, h_t))
//! ```
//!
//! with either the exponential-kernel memory `h_{t+1} = h_t + sum_l (B_l
//! x_{t+1} - C_l h_t)` or the truncated-window memory `h_t = sum_s
//! diag(k_s) x_{t-s}` (zero pre-history). States are clamped to
//! `[delta, 1 - delta]` so the likelihood stays finite; the clamp passes no
//! gradient where it is active.
//!
//! Forward passes cache everything the backward co-state recursion needs.

use ndarray::{Array1, Array2};

use crate::model::{Kernel, NmfParameters};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Mean-field drift `f(x; A) = A x - diag(x) A x`, nonnegative on
/// `[0,1]^n` for nonnegative rates.
pub fn mean_field_drift<F: Scalar>(x: &Array1<F>, rates: &Array2<F>) -> Result<Array1<F>> {
    if x.len() != rates.nrows() || rates.nrows() != rates.ncols() {
        return Err(Error::Dimension(format!(
            "drift: state length {} vs rate matrix {:?}",
            x.len(),
            rates.shape()
        )));
    }
    let inflow = rates.dot(x);
    Ok(Array1::from_shape_fn(x.len(), |i| (F::one() - x[i]) * inflow[i]))
}

/// Correction net evaluated on the concatenated `[x; h]`.
pub fn correction_net<F: Scalar>(
    params: &NmfParameters<F>,
    x: &Array1<F>,
    h: &Array1<F>,
) -> Result<Array1<F>> {
    let n = params.n();
    if x.len() != n || h.len() != n {
        return Err(Error::Dimension("correction input length mismatch".into()));
    }
    let mut input = Array1::zeros(2 * n);
    input.slice_mut(ndarray::s![..n]).assign(x);
    input.slice_mut(ndarray::s![n..]).assign(h);
    Ok(params.correction.forward(&input, None))
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache<F> {
    /// `A x_t`.
    pub inflow: Array1<F>,
    /// Hidden activations of the correction net at `[x_t; h_t]`.
    pub hidden: Vec<Array1<F>>,
    /// 1 where the raw update stayed inside `[delta, 1-delta]`, else 0.
    pub clamp_pass: Array1<F>,
}

/// Forward states plus per-step caches. `states[t]` is `x_t` for
/// `t = 0..=T`; `memory[t]` is `h_t` on the same range.
#[derive(Debug, Clone)]
pub struct Trajectory<F> {
    pub states: Vec<Array1<F>>,
    pub memory: Vec<Array1<F>>,
    pub steps: Vec<StepCache<F>>,
}

impl<F: Scalar> Trajectory<F> {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Infection-probability row at step `t`.
    pub fn state(&self, t: usize) -> &Array1<F> {
        &self.states[t]
    }

    /// Influence sigma(t) = sum_i x_t[i] for t = 1..=T.
    pub fn influence_curve(&self) -> Vec<F> {
        self.states[1..].iter().map(|x| x.iter().copied().sum()).collect()
    }

    /// All states as a `(T+1) x n` matrix, row `t` = `x_t`.
    pub fn state_matrix(&self) -> Array2<F> {
        let n = self.states[0].len();
        Array2::from_shape_fn((self.states.len(), n), |(t, i)| self.states[t][i])
    }

    /// Augmented state `m_t`: `[x_t; h_t]` for the exponential kernel,
    /// `[x_t; ...; x_{t-tau}]` (zero pre-history) for the window kernel.
    pub fn augmented_state(&self, t: usize, kernel: &Kernel<F>) -> Array1<F> {
        let n = self.states[0].len();
        match kernel {
            Kernel::Exp { .. } => {
                let mut m = Array1::zeros(2 * n);
                m.slice_mut(ndarray::s![..n]).assign(&self.states[t]);
                m.slice_mut(ndarray::s![n..]).assign(&self.memory[t]);
                m
            }
            Kernel::Window { lags } => {
                let mut m = Array1::zeros(lags.len() * n);
                for (s, _) in lags.iter().enumerate() {
                    if t >= s {
                        m.slice_mut(ndarray::s![s * n..(s + 1) * n]).assign(&self.states[t - s]);
                    }
                }
                m
            }
        }
    }
}

fn clamp_with_mask<F: Scalar>(raw: &mut Array1<F>, mask: &mut Array1<F>, delta: F) {
    let hi = F::one() - delta;
    for (v, m) in raw.iter_mut().zip(mask.iter_mut()) {
        if *v < delta {
            *v = delta;
            *m = F::zero();
        } else if *v > hi {
            *v = hi;
            *m = F::zero();
        } else {
            *m = F::one();
        }
    }
}

fn initial_state<F: Scalar>(n: usize, source: &[usize], delta: F) -> Result<Array1<F>> {
    let mut x = Array1::from_elem(n, delta);
    for &s in source {
        if s >= n {
            return Err(Error::InvalidArgument(format!("source node {s} out of range")));
        }
        x[s] = F::one() - delta;
    }
    Ok(x)
}

fn check_finite<F: Scalar>(v: &Array1<F>, step: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step, what: what.into() })
    }
}

/// Memory read at step t for the window kernel: `h_t = sum_s k_s (.) x_{t-s}`.
fn window_memory<F: Scalar>(lags: &[Array1<F>], states: &[Array1<F>], t: usize) -> Array1<F> {
    let n = states[0].len();
    let mut h = Array1::zeros(n);
    for (s, k) in lags.iter().enumerate() {
        if t >= s {
            let x = &states[t - s];
            for i in 0..n {
                h[i] += k[i] * x[i];
            }
        }
    }
    h
}

/// Runs the recurrence for `horizon` steps from `x_0 = clamp(chi_S)`,
/// `h_0 = 0`, caching activations for the backward pass. Errors if any state
/// goes non-finite (divergence), naming the step.
pub fn forward<F: Scalar>(
    params: &NmfParameters<F>,
    source: &[usize],
    horizon: usize,
) -> Result<Trajectory<F>> {
    let n = params.n();
    let delta = params.clamp_delta;
    let x0 = initial_state(n, source, delta)?;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut memory = Vec::with_capacity(horizon + 1);
    let mut steps = Vec::with_capacity(horizon);
    states.push(x0);
    memory.push(Array1::zeros(n));

    let mut input = Array1::zeros(2 * n);
    for t in 0..horizon {
        let x = &states[t];
        let h = match &params.kernel {
            Kernel::Exp { .. } => memory[t].clone(),
            Kernel::Window { lags } => window_memory(lags, &states, t),
        };
        let inflow = params.rates.dot(x);
        input.slice_mut(ndarray::s![..n]).assign(x);
        input.slice_mut(ndarray::s![n..]).assign(&h);
        let mut hidden = Vec::with_capacity(params.correction.weights.len() - 1);
        let eps = params.correction.forward(&input, Some(&mut hidden));
        let mut next = Array1::from_shape_fn(n, |i| {
            x[i] + (F::one() - x[i]) * inflow[i] + eps[i]
        });
        let mut pass = Array1::zeros(n);
        clamp_with_mask(&mut next, &mut pass, delta);
        check_finite(&next, t, "state update")?;
        let h_next = match &params.kernel {
            Kernel::Exp { feed, decay } => {
                let mut hn = h.clone();
                for (b, c) in feed.iter().zip(decay) {
                    hn += &b.dot(&next);
                    hn -= &c.dot(&h);
                }
                check_finite(&hn, t, "memory update")?;
                hn
            }
            // Placeholder; window memory is reconstructed from states below.
            Kernel::Window { .. } => Array1::zeros(n),
        };
        if let Kernel::Window { .. } = &params.kernel {
            memory[t] = h;
        }
        states.push(next);
        memory.push(h_next);
        steps.push(StepCache { inflow, hidden, clamp_pass: pass });
    }
    if let Kernel::Window { lags } = &params.kernel {
        memory[horizon] = window_memory(lags, &states, horizon);
    }
    Ok(Trajectory { states, memory, steps })
}

/// Influence curve `sigma(t)` for `t = 1..=horizon` by a plain forward pass.
pub fn estimate_influence<F: Scalar>(
    params: &NmfParameters<F>,
    source: &[usize],
    horizon: usize,
) -> Result<Vec<F>> {
    Ok(forward(params, source, horizon)?.influence_curve())
}

/// Column-batched trajectory: `states[t]` has one instance per column.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch<F> {
    pub states: Vec<Array2<F>>,
    pub memory: Vec<Array2<F>>,
    pub inflow: Vec<Array2<F>>,
    pub hidden: Vec<Vec<Array2<F>>>,
    pub clamp_pass: Vec<Array2<F>>,
}

impl<F: Scalar> TrajectoryBatch<F> {
    pub fn horizon(&self) -> usize {
        self.clamp_pass.len()
    }

    pub fn batch_size(&self) -> usize {
        self.states[0].ncols()
    }
}

/// Batched forward over one initial-state matrix (columns are instances).
pub fn forward_batch<F: Scalar>(
    params: &NmfParameters<F>,
    x0: &Array2<F>,
    horizon: usize,
) -> Result<TrajectoryBatch<F>> {
    let n = params.n();
    if x0.nrows() != n {
        return Err(Error::Dimension("initial state rows do not match n".into()));
    }
    let cols = x0.ncols();
    let delta = params.clamp_delta;
    let hi = F::one() - delta;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut memory = Vec::with_capacity(horizon + 1);
    let mut inflows = Vec::with_capacity(horizon);
    let mut hiddens = Vec::with_capacity(horizon);
    let mut clamps = Vec::with_capacity(horizon);
    states.push(x0.mapv(|v| v.max(delta).min(hi)));
    memory.push(Array2::zeros((n, cols)));

    for t in 0..horizon {
        let x = &states[t];
        let h = match &params.kernel {
            Kernel::Exp { .. } => memory[t].clone(),
            Kernel::Window { lags } => {
                let mut hm = Array2::zeros((n, cols));
                for (s, k) in lags.iter().enumerate() {
                    if t >= s {
                        let xs = &states[t - s];
                        for i in 0..n {
                            for c in 0..cols {
                                hm[[i, c]] += k[i] * xs[[i, c]];
                            }
                        }
                    }
                }
                hm
            }
        };
        let inflow = params.rates.dot(x);
        let mut input = Array2::zeros((2 * n, cols));
        input.slice_mut(ndarray::s![..n, ..]).assign(x);
        input.slice_mut(ndarray::s![n.., ..]).assign(&h);
        let mut hidden = Vec::with_capacity(params.correction.weights.len() - 1);
        let eps = params.correction.forward_batch(&input, Some(&mut hidden));
        let mut next = Array2::zeros((n, cols));
        let mut pass = Array2::zeros((n, cols));
        for i in 0..n {
            for c in 0..cols {
                let raw = x[[i, c]] + (F::one() - x[[i, c]]) * inflow[[i, c]] + eps[[i, c]];
                if raw < delta {
                    next[[i, c]] = delta;
                } else if raw > hi {
                    next[[i, c]] = hi;
                } else {
                    next[[i, c]] = raw;
                    pass[[i, c]] = F::one();
                }
            }
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: t, what: "batched state update".into() });
        }
        let h_next = match &params.kernel {
            Kernel::Exp { feed, decay } => {
                let mut hn = h.clone();
                for (b, c) in feed.iter().zip(decay) {
                    hn += &b.dot(&next);
                    hn -= &c.dot(&h);
                }
                if !hn.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { step: t, what: "batched memory update".into() });
                }
                hn
            }
            Kernel::Window { .. } => Array2::zeros((n, cols)),
        };
        if let Kernel::Window { .. } = &params.kernel {
            memory[t] = h.clone();
        }
        states.push(next);
        memory.push(h_next);
        inflows.push(inflow);
        hiddens.push(hidden);
        clamps.push(pass);
    }
    Ok(TrajectoryBatch { states, memory, inflow: inflows, hidden: hiddens, clamp_pass: clamps })
}

/// Builds the initial-state matrix for a list of source sets.
pub fn batch_initial_state<F: Scalar>(
    n: usize,
    sources: &[&[usize]],
    delta: F,
) -> Result<Array2<F>> {
    let mut x0 = Array2::from_elem((n, sources.len()), delta);
    for (c, src) in sources.iter().enumerate() {
        for &s in *src {
            if s >= n {
                return Err(Error::InvalidArgument(format!("source node {s} out of range")));
            }
            x0[[s, c]] = F::one() - delta;
        }
    }
    Ok(x0)
}

/// One application of the per-step map `g` on an augmented state, including
/// the clamp. Used by the Hamiltonian diagnostics; the trainable path runs
/// through [`forward`].
pub fn step_map<F: Scalar>(params: &NmfParameters<F>, m: &Array1<F>) -> Result<Array1<F>> {
    let n = params.n();
    let delta = params.clamp_delta;
    match &params.kernel {
        Kernel::Exp { feed, decay } => {
            if m.len() != 2 * n {
                return Err(Error::Dimension("augmented state must be [x; h]".into()));
            }
            let x = m.slice(ndarray::s![..n]).to_owned();
            let h = m.slice(ndarray::s![n..]).to_owned();
            let drift = mean_field_drift(&x, &params.rates)?;
            let eps = correction_net(params, &x, &h)?;
            let mut next = &x + &drift + &eps;
            let mut mask = Array1::zeros(n);
            clamp_with_mask(&mut next, &mut mask, delta);
            let mut hn = h.clone();
            for (b, c) in feed.iter().zip(decay) {
                hn += &b.dot(&next);
                hn -= &c.dot(&h);
            }
            let mut out = Array1::zeros(2 * n);
            out.slice_mut(ndarray::s![..n]).assign(&next);
            out.slice_mut(ndarray::s![n..]).assign(&hn);
            Ok(out)
        }
        Kernel::Window { lags } => {
            let w = lags.len();
            if m.len() != w * n {
                return Err(Error::Dimension("augmented state must stack tau+1 blocks".into()));
            }
            let x = m.slice(ndarray::s![..n]).to_owned();
            let mut h = Array1::zeros(n);
            for (s, k) in lags.iter().enumerate() {
                for i in 0..n {
                    h[i] += k[i] * m[s * n + i];
                }
            }
            let drift = mean_field_drift(&x, &params.rates)?;
            let eps = correction_net(params, &x, &h)?;
            let mut next = &x + &drift + &eps;
            let mut mask = Array1::zeros(n);
            clamp_with_mask(&mut next, &mut mask, delta);
            let mut out = Array1::zeros(w * n);
            out.slice_mut(ndarray::s![..n]).assign(&next);
            // Older blocks shift down; the last block falls off.
            out.slice_mut(ndarray::s![n..]).assign(&m.slice(ndarray::s![..(w - 1) * n]));
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitConfig, KernelSpec, NmfParameters};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cfg(kernel: KernelSpec) -> InitConfig {
        InitConfig { hidden: vec![6, 5], kernel, ..InitConfig::default() }
    }

    #[test]
    fn drift_vanishes_at_the_corners() {
        let rates = ndarray::arr2(&[[0.0, 0.7], [1.3, 0.0]]);
        let zero = Array1::from_vec(vec![0.0, 0.0]);
        let one = Array1::from_vec(vec![1.0, 1.0]);
        assert!(mean_field_drift(&zero, &rates).unwrap().iter().all(|&v| v == 0.0));
        assert!(mean_field_drift(&one, &rates).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drift_hand_value() {
        // Edge 0 -> 1 with rate 2: f = (0, (1 - 0.5) * 2 * 1).
        let rates = ndarray::arr2(&[[0.0, 0.0], [2.0, 0.0]]);
        let x = Array1::from_vec(vec![1.0, 0.5]);
        let f = mean_field_drift(&x, &rates).unwrap();
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_parameters_freeze_the_state() {
        let p = NmfParameters::<f64>::zeros(3, &cfg(KernelSpec::Exp { levels: 1 }), None).unwrap();
        let traj = forward(&p, &[1], 5).unwrap();
        let delta = p.clamp_delta;
        for t in 0..=5 {
            assert_eq!(traj.states[t][0], delta);
            assert_eq!(traj.states[t][1], 1.0 - delta);
            assert_eq!(traj.states[t][2], delta);
        }
    }

    #[test]
    fn mean_field_states_are_monotone_without_correction() {
        let mut p = NmfParameters::<f64>::zeros(4, &cfg(KernelSpec::Exp { levels: 1 }), None).unwrap();
        p.rates[[1, 0]] = 0.4;
        p.rates[[2, 1]] = 0.8;
        p.rates[[3, 2]] = 0.2;
        let traj = forward(&p, &[0], 8).unwrap();
        for t in 0..8 {
            for i in 0..4 {
                assert!(traj.states[t + 1][i] >= traj.states[t][i]);
            }
        }
    }

    #[test]
    fn single_edge_single_step_saturates() {
        let mut p = NmfParameters::<f64>::zeros(2, &cfg(KernelSpec::Exp { levels: 1 }), None).unwrap();
        p.rates[[1, 0]] = 1.0;
        let traj = forward(&p, &[0], 1).unwrap();
        // x_1 at the target node: 0 + 1 * (1 - delta) * (1 - delta) clamps to 1 - delta.
        assert_eq!(traj.states[1][1], 1.0 - p.clamp_delta);
        assert_eq!(traj.steps[0].clamp_pass[1], 0.0);
    }

    #[test]
    fn window_with_identity_current_lag_equals_memoryless() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p = NmfParameters::<f64>::init(3, &cfg(KernelSpec::Window { tau: 0 }), None, &mut rng)
            .unwrap();
        let traj = forward(&p, &[0], 4).unwrap();
        for t in 0..4 {
            for i in 0..3 {
                assert!((traj.memory[t][i] - traj.states[t][i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_window_kernel_reads_zero_memory() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut p = NmfParameters::<f64>::init(3, &cfg(KernelSpec::Window { tau: 2 }), None, &mut rng)
            .unwrap();
        if let Kernel::Window { lags } = &mut p.kernel {
            lags.iter_mut().for_each(|k| k.fill(0.0));
        }
        let traj = forward(&p, &[1], 5).unwrap();
        for t in 0..5 {
            assert!(traj.memory[t].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn window_blocks_shift() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let p = NmfParameters::<f64>::init(3, &cfg(KernelSpec::Window { tau: 2 }), None, &mut rng)
            .unwrap();
        let traj = forward(&p, &[0], 6).unwrap();
        let n = 3;
        for t in 0..6 {
            let m_t = traj.augmented_state(t, &p.kernel);
            let m_next = traj.augmented_state(t + 1, &p.kernel);
            // Blocks 1..=tau of m_{t+1} equal blocks 0..tau-1 of m_t exactly.
            for s in 1..3 {
                for i in 0..n {
                    assert_eq!(m_next[s * n + i], m_t[(s - 1) * n + i]);
                }
            }
        }
    }

    #[test]
    fn step_map_reproduces_forward() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for kernel in [KernelSpec::Exp { levels: 2 }, KernelSpec::Window { tau: 2 }] {
            let p = NmfParameters::<f64>::init(4, &cfg(kernel), None, &mut rng).unwrap();
            let traj = forward(&p, &[0, 2], 5).unwrap();
            for t in 0..5 {
                let m = traj.augmented_state(t, &p.kernel);
                let next = step_map(&p, &m).unwrap();
                let expect = traj.augmented_state(t + 1, &p.kernel);
                for (a, b) in next.iter().zip(expect.iter()) {
                    assert!((a - b).abs() < 1e-12, "kernel {kernel:?} step {t}");
                }
            }
        }
    }

    #[test]
    fn influence_of_zero_dynamics_is_the_source_size() {
        let p = NmfParameters::<f64>::zeros(8, &cfg(KernelSpec::Exp { levels: 1 }), None).unwrap();
        let sigma = estimate_influence(&p, &[0, 2, 4, 5, 7], 6).unwrap();
        for s in sigma {
            assert!((s - 5.0).abs() < 1e-4);
        }
    }

    #[test]
    fn influence_never_exceeds_n() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let p = NmfParameters::<f64>::init(6, &cfg(KernelSpec::Exp { levels: 1 }), None, &mut rng)
            .unwrap();
        let sigma = estimate_influence(&p, &[0, 1], 10).unwrap();
        assert!(sigma.iter().all(|&s| s <= 6.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let p = NmfParameters::<f64>::init(5, &cfg(KernelSpec::Exp { levels: 1 }), None, &mut rng)
            .unwrap();
        let a = forward(&p, &[1, 3], 7).unwrap();
        let b = forward(&p, &[1, 3], 7).unwrap();
        for t in 0..=7 {
            assert_eq!(a.states[t], b.states[t]);
        }
    }

    #[test]
    fn zero_correction_reduces_to_pure_mean_field() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut p = NmfParameters::<f64>::init(4, &cfg(KernelSpec::Exp { levels: 1 }), None, &mut rng)
            .unwrap();
        for w in &mut p.correction.weights {
            w.fill(0.0);
        }
        for b in &mut p.correction.biases {
            b.fill(0.0);
        }
        let traj = forward(&p, &[0], 6).unwrap();
        // Replay the bare recurrence x <- clamp(x + f(x; A)).
        let delta = p.clamp_delta;
        let mut x = traj.states[0].clone();
        for t in 1..=6 {
            let f = mean_field_drift(&x, &p.rates).unwrap();
            x = (&x + &f).mapv(|v| v.max(delta).min(1.0 - delta));
            for i in 0..4 {
                assert_eq!(x[i], traj.states[t][i], "step {t} node {i}");
            }
        }
    }

    #[test]
    fn batched_forward_matches_single_columns() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for kernel in [KernelSpec::Exp { levels: 1 }, KernelSpec::Window { tau: 2 }] {
            let p = NmfParameters::<f64>::init(5, &cfg(kernel), None, &mut rng).unwrap();
            let sources: Vec<Vec<usize>> = vec![vec![0], vec![1, 3], vec![2, 4]];
            let refs: Vec<&[usize]> = sources.iter().map(|s| s.as_slice()).collect();
            let x0 = batch_initial_state(5, &refs, p.clamp_delta).unwrap();
            let batch = forward_batch(&p, &x0, 6).unwrap();
            for (c, src) in sources.iter().enumerate() {
                let single = forward(&p, src, 6).unwrap();
                for t in 0..=6 {
                    for i in 0..5 {
                        let gap = (single.states[t][i] - batch.states[t][[i, c]]).abs();
                        assert!(gap < 1e-12, "kernel {kernel:?} t={t} i={i} c={c}");
                    }
                }
            }
        }
    }
}
