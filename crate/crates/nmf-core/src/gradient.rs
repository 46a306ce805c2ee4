//! Exact gradients of the training objective by a backward co-state
//! recursion over the cached forward pass.
//!
//! For one cascade the objective is `J(theta) = loss + r(theta)` where the
//! loss is the negated per-step log-likelihood (binary cross-entropy
//! against the observed grid) and `r` is a weighted l1 penalty. Writing the
//! recurrence as `m_{t+1} = g(m_t; theta)` on the augmented state, the
//! co-states satisfy
//!
//! ```text
//! p_T = -grad_{m_T} loss
//! p_t = p_{t+1} . grad_m g(m_t; theta) - grad_{m_t} loss
//! ```
//!
//! (the second term injects the per-step loss, which depends on every
//! `x_t`, not just the terminal state), and the parameter gradient is
//! `grad J = -sum_t d_theta H(m_t, p_{t+1}; theta)` with the Hamiltonian
//! `H(m, p; theta) = p . g(m; theta) - r(theta)/T`. The code runs the same
//! recursion in plain gradient convention and exposes the co-states for the
//! Hamiltonian diagnostics.

use ndarray::{s, Array1, Array2, Axis};

use crate::cascade::ObservationGrid;
use crate::dynamics::{step_map, Trajectory, TrajectoryBatch};
use crate::model::{Kernel, Mlp, NmfParameters};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Gradient with the same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct GradientBundle<F> {
    pub rates: Array2<F>,
    pub weights: Vec<Array2<F>>,
    pub biases: Vec<Array1<F>>,
    pub kernel: Kernel<F>,
}

impl<F: Scalar> GradientBundle<F> {
    pub fn zeros_like(params: &NmfParameters<F>) -> Self {
        let kernel = match &params.kernel {
            Kernel::Exp { feed, decay } => Kernel::Exp {
                feed: feed.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
                decay: decay.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            },
            Kernel::Window { lags } => {
                Kernel::Window { lags: lags.iter().map(|v| Array1::zeros(v.len())).collect() }
            }
        };
        Self {
            rates: Array2::zeros(params.rates.raw_dim()),
            weights: params.correction.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: params.correction.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            kernel,
        }
    }

    /// Same ordering as [`NmfParameters::flatten`].
    pub fn flatten(&self) -> Array1<F> {
        let mut out = Vec::new();
        out.extend(self.rates.iter().copied());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        match &self.kernel {
            Kernel::Exp { feed, decay } => {
                for (bm, cm) in feed.iter().zip(decay) {
                    out.extend(bm.iter().copied());
                    out.extend(cm.iter().copied());
                }
            }
            Kernel::Window { lags } => {
                for k in lags {
                    out.extend(k.iter().copied());
                }
            }
        }
        Array1::from_vec(out)
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.rates += &other.rates;
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
        match (&mut self.kernel, &other.kernel) {
            (Kernel::Exp { feed, decay }, Kernel::Exp { feed: of, decay: od }) => {
                for (a, b) in feed.iter_mut().zip(of) {
                    *a += b;
                }
                for (a, b) in decay.iter_mut().zip(od) {
                    *a += b;
                }
            }
            (Kernel::Window { lags }, Kernel::Window { lags: ol }) => {
                for (a, b) in lags.iter_mut().zip(ol) {
                    *a += b;
                }
            }
            _ => panic!("kernel variants differ"),
        }
    }

    pub fn scale(&mut self, factor: F) {
        self.rates.mapv_inplace(|v| v * factor);
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
        match &mut self.kernel {
            Kernel::Exp { feed, decay } => {
                feed.iter_mut().for_each(|m| m.mapv_inplace(|v| v * factor));
                decay.iter_mut().for_each(|m| m.mapv_inplace(|v| v * factor));
            }
            Kernel::Window { lags } => {
                lags.iter_mut().for_each(|k| k.mapv_inplace(|v| v * factor));
            }
        }
    }

    /// Zeroes the diagonal and any masked entries of the rate gradient so
    /// projected parameters stay projected.
    pub fn respect_support(&mut self, params: &NmfParameters<F>) {
        let n = self.rates.nrows();
        for i in 0..n {
            self.rates[[i, i]] = F::zero();
            for j in 0..n {
                if params.mask.as_ref().is_some_and(|m| m[[i, j]] == 0) {
                    self.rates[[i, j]] = F::zero();
                }
            }
        }
    }
}

/// l1 regularization weights; defaults follow the training recipe
/// (0.001 on the rate matrix, 0.0001 on everything else).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegWeights {
    pub rates: f64,
    pub other: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self { rates: 1e-3, other: 1e-4 }
    }
}

/// r(theta) = w_A ||A||_1 + w_o (||eta||_1 + ||kernel||_1). Masked and
/// diagonal rate entries are held at zero, so they contribute nothing.
pub fn regularizer<F: Scalar>(params: &NmfParameters<F>, reg: RegWeights) -> F {
    let wa = F::of(reg.rates);
    let wo = F::of(reg.other);
    let mut total = F::zero();
    for v in params.rates.iter() {
        total += wa * v.abs();
    }
    for w in &params.correction.weights {
        for v in w.iter() {
            total += wo * v.abs();
        }
    }
    for b in &params.correction.biases {
        for v in b.iter() {
            total += wo * v.abs();
        }
    }
    match &params.kernel {
        Kernel::Exp { feed, decay } => {
            for m in feed.iter().chain(decay) {
                for v in m.iter() {
                    total += wo * v.abs();
                }
            }
        }
        Kernel::Window { lags } => {
            for k in lags {
                for v in k.iter() {
                    total += wo * v.abs();
                }
            }
        }
    }
    total
}

fn l1_sub<F: Scalar>(v: F, w: F) -> F {
    if v > F::zero() {
        w
    } else if v < F::zero() {
        -w
    } else {
        F::zero()
    }
}

/// Adds the l1 subgradient (`sign * weight`, 0 at 0) into `grads`.
pub fn add_regularizer_subgradient<F: Scalar>(
    params: &NmfParameters<F>,
    reg: RegWeights,
    grads: &mut GradientBundle<F>,
) {
    let wa = F::of(reg.rates);
    let wo = F::of(reg.other);
    for (g, v) in grads.rates.iter_mut().zip(params.rates.iter()) {
        *g += l1_sub(*v, wa);
    }
    for (gw, w) in grads.weights.iter_mut().zip(&params.correction.weights) {
        for (g, v) in gw.iter_mut().zip(w.iter()) {
            *g += l1_sub(*v, wo);
        }
    }
    for (gb, b) in grads.biases.iter_mut().zip(&params.correction.biases) {
        for (g, v) in gb.iter_mut().zip(b.iter()) {
            *g += l1_sub(*v, wo);
        }
    }
    match (&mut grads.kernel, &params.kernel) {
        (Kernel::Exp { feed: gf, decay: gd }, Kernel::Exp { feed, decay }) => {
            for (gm, m) in gf.iter_mut().zip(feed).chain(gd.iter_mut().zip(decay)) {
                for (g, v) in gm.iter_mut().zip(m.iter()) {
                    *g += l1_sub(*v, wo);
                }
            }
        }
        (Kernel::Window { lags: gl }, Kernel::Window { lags }) => {
            for (gk, k) in gl.iter_mut().zip(lags) {
                for (g, v) in gk.iter_mut().zip(k.iter()) {
                    *g += l1_sub(*v, wo);
                }
            }
        }
        _ => unreachable!("bundle built from the same parameters"),
    }
    grads.respect_support(params);
}

/// Negated per-step log-likelihood of the observed grid under the
/// trajectory: `sum_{t=1..T} sum_i BCE(x_t[i], grid[t][i])`. Nonnegative;
/// finite thanks to the state clamp.
pub fn bce_loss<F: Scalar>(traj: &Trajectory<F>, grid: &ObservationGrid) -> Result<F> {
    let horizon = traj.horizon();
    if grid.steps < horizon || grid.states.ncols() != traj.states[0].len() {
        return Err(Error::Dimension("grid does not cover the trajectory".into()));
    }
    let mut total = F::zero();
    for t in 1..=horizon {
        let x = traj.state(t);
        for (i, &xi) in x.iter().enumerate() {
            total -= if grid.states[[t, i]] != 0 {
                xi.ln()
            } else {
                (F::one() - xi).ln()
            };
        }
    }
    Ok(total)
}

/// d(loss)/dx at one step: `(x - target) / (x (1 - x))`.
fn loss_grad_row<F: Scalar>(x: &Array1<F>, grid: &ObservationGrid, t: usize) -> Array1<F> {
    Array1::from_shape_fn(x.len(), |i| {
        let xi = x[i];
        let target = if grid.states[[t, i]] != 0 { F::one() } else { F::zero() };
        (xi - target) / (xi * (F::one() - xi))
    })
}

/// Backward pass through the correction net; accumulates parameter
/// gradients and returns the gradient w.r.t. the concatenated input.
fn mlp_backward<F: Scalar>(
    mlp: &Mlp<F>,
    input: &Array1<F>,
    hidden: &[Array1<F>],
    gout: &Array1<F>,
    gw: &mut [Array2<F>],
    gb: &mut [Array1<F>],
) -> Array1<F> {
    let last = mlp.weights.len() - 1;
    let mut g = gout.clone();
    for l in (0..=last).rev() {
        if l < last {
            // Through tanh: hidden[l] holds tanh(z).
            for (gi, a) in g.iter_mut().zip(hidden[l].iter()) {
                *gi *= F::one() - *a * *a;
            }
        }
        let prev = if l == 0 { input } else { &hidden[l - 1] };
        let gwl = &mut gw[l];
        for (i, &gi) in g.iter().enumerate() {
            if gi != F::zero() {
                for (j, &aj) in prev.iter().enumerate() {
                    gwl[[i, j]] += gi * aj;
                }
            }
        }
        gb[l] += &g;
        g = mlp.weights[l].t().dot(&g);
    }
    g
}

/// Co-states `p_0..p_T` on the augmented state (`[x; h]` for the
/// exponential kernel, the stacked window otherwise).
#[derive(Debug, Clone)]
pub struct CoStateTrajectory<F> {
    pub p: Vec<Array1<F>>,
}

fn rank_one_add<F: Scalar>(target: &mut Array2<F>, u: &Array1<F>, v: &Array1<F>, sign: F) {
    for (i, &ui) in u.iter().enumerate() {
        if ui != F::zero() {
            let s = sign * ui;
            for (j, &vj) in v.iter().enumerate() {
                target[[i, j]] += s * vj;
            }
        }
    }
}

/// Exact gradient of `J = loss + r` for one cascade, plus the co-state
/// trajectory. `reg = None` omits the regularizer (the batched trainer adds
/// it once per batch). A zero-length horizon yields a zero gradient.
pub fn backward_gradient<F: Scalar>(
    params: &NmfParameters<F>,
    traj: &Trajectory<F>,
    grid: &ObservationGrid,
    reg: Option<RegWeights>,
) -> Result<(GradientBundle<F>, CoStateTrajectory<F>)> {
    let n = params.n();
    let horizon = traj.horizon();
    if grid.steps < horizon || grid.states.ncols() != n {
        return Err(Error::Dimension("grid does not cover the trajectory".into()));
    }
    let mut grads = GradientBundle::zeros_like(params);
    let aug = params.kernel.augmented_dim(n);
    let mut costates = vec![Array1::zeros(aug); horizon + 1];
    if horizon == 0 {
        return Ok((grads, CoStateTrajectory { p: costates }));
    }

    match &params.kernel {
        Kernel::Exp { feed, decay } => {
            let mut gx = loss_grad_row(traj.state(horizon), grid, horizon);
            let mut gh: Array1<F> = Array1::zeros(n);
            store_costate(&mut costates[horizon], &[&gx, &gh]);
            for t in (0..horizon).rev() {
                let cache = &traj.steps[t];
                let x = traj.state(t);
                let h = &traj.memory[t];
                let x_next = traj.state(t + 1);
                // h_{t+1} = h_t + sum_l (B_l x_{t+1} - C_l h_t)
                let mut a = gx.clone();
                let mut gh_through: Array1<F> = gh.clone();
                let (gf, gd) = match &mut grads.kernel {
                    Kernel::Exp { feed: gf, decay: gd } => (gf, gd),
                    _ => unreachable!(),
                };
                for (l, (b, c)) in feed.iter().zip(decay).enumerate() {
                    a += &b.t().dot(&gh);
                    rank_one_add(&mut gf[l], &gh, x_next, F::one());
                    rank_one_add(&mut gd[l], &gh, h, -F::one());
                    gh_through -= &c.t().dot(&gh);
                }
                // x_{t+1} = clamp(x_t + f + eps)
                let gu = &a * &cache.clamp_pass;
                let weighted = Array1::from_shape_fn(n, |i| (F::one() - x[i]) * gu[i]);
                rank_one_add(&mut grads.rates, &weighted, x, F::one());
                let gx_drift = params.rates.t().dot(&weighted) - &(&cache.inflow * &gu);
                let mut input = Array1::zeros(2 * n);
                input.slice_mut(s![..n]).assign(x);
                input.slice_mut(s![n..]).assign(h);
                let gin = mlp_backward(
                    &params.correction,
                    &input,
                    &cache.hidden,
                    &gu,
                    &mut grads.weights,
                    &mut grads.biases,
                );
                let geps_x = gin.slice(s![..n]).to_owned();
                let geps_h = gin.slice(s![n..]).to_owned();
                gx = &gu + &gx_drift + &geps_x;
                if t >= 1 {
                    gx += &loss_grad_row(x, grid, t);
                }
                gh = gh_through + geps_h;
                store_costate(&mut costates[t], &[&gx, &gh]);
            }
        }
        Kernel::Window { lags } => {
            let window = lags.len();
            let mut blocks: Vec<Array1<F>> = vec![Array1::zeros(n); window];
            blocks[0] = loss_grad_row(traj.state(horizon), grid, horizon);
            store_costate_blocks(&mut costates[horizon], &blocks);
            for t in (0..horizon).rev() {
                let cache = &traj.steps[t];
                let x = traj.state(t);
                let h = &traj.memory[t];
                let gu = &blocks[0] * &cache.clamp_pass;
                let weighted = Array1::from_shape_fn(n, |i| (F::one() - x[i]) * gu[i]);
                rank_one_add(&mut grads.rates, &weighted, x, F::one());
                let gx_drift = params.rates.t().dot(&weighted) - &(&cache.inflow * &gu);
                let mut input = Array1::zeros(2 * n);
                input.slice_mut(s![..n]).assign(x);
                input.slice_mut(s![n..]).assign(h);
                let gin = mlp_backward(
                    &params.correction,
                    &input,
                    &cache.hidden,
                    &gu,
                    &mut grads.weights,
                    &mut grads.biases,
                );
                let geps_x = gin.slice(s![..n]).to_owned();
                let geps_h = gin.slice(s![n..]).to_owned();
                let glags = match &mut grads.kernel {
                    Kernel::Window { lags } => lags,
                    _ => unreachable!(),
                };
                for (sft, gk) in glags.iter_mut().enumerate() {
                    if t >= sft {
                        let xs = traj.state(t - sft);
                        for i in 0..n {
                            gk[i] += geps_h[i] * xs[i];
                        }
                    }
                }
                let mut next_blocks: Vec<Array1<F>> = vec![Array1::zeros(n); window];
                for (sft, k) in lags.iter().enumerate() {
                    let mut contrib = Array1::zeros(n);
                    for i in 0..n {
                        contrib[i] = k[i] * geps_h[i];
                    }
                    if sft + 1 < window {
                        contrib += &blocks[sft + 1];
                    }
                    next_blocks[sft] = contrib;
                }
                next_blocks[0] += &gu;
                next_blocks[0] += &gx_drift;
                next_blocks[0] += &geps_x;
                if t >= 1 {
                    next_blocks[0] += &loss_grad_row(x, grid, t);
                }
                blocks = next_blocks;
                store_costate_blocks(&mut costates[t], &blocks);
            }
        }
    }

    if let Some(r) = reg {
        add_regularizer_subgradient(params, r, &mut grads);
    } else {
        grads.respect_support(params);
    }
    Ok((grads, CoStateTrajectory { p: costates }))
}

fn store_costate<F: Scalar>(slot: &mut Array1<F>, parts: &[&Array1<F>]) {
    let mut offset = 0;
    for part in parts {
        for (k, &v) in part.iter().enumerate() {
            slot[offset + k] = -v;
        }
        offset += part.len();
    }
}

fn store_costate_blocks<F: Scalar>(slot: &mut Array1<F>, blocks: &[Array1<F>]) {
    let refs: Vec<&Array1<F>> = blocks.iter().collect();
    store_costate(slot, &refs);
}

/// Total Hamiltonian `sum_{t=0}^{T-1} [p_{t+1} . g(m_t; theta) - r/T]`
/// evaluated at a frozen trajectory and co-state sequence.
pub fn total_hamiltonian<F: Scalar>(
    params: &NmfParameters<F>,
    traj: &Trajectory<F>,
    costates: &CoStateTrajectory<F>,
    reg: RegWeights,
) -> Result<F> {
    let horizon = traj.horizon();
    if costates.p.len() != horizon + 1 {
        return Err(Error::Dimension("co-state length does not match trajectory".into()));
    }
    let r = regularizer(params, reg);
    let per_step = r / F::of(horizon.max(1) as f64);
    let mut total = F::zero();
    for t in 0..horizon {
        let m = traj.augmented_state(t, &params.kernel);
        let g = step_map(params, &m)?;
        let mut dot = F::zero();
        for (p, gv) in costates.p[t + 1].iter().zip(g.iter()) {
            dot += *p * *gv;
        }
        total += dot - per_step;
    }
    Ok(total)
}

/// Mean objective over a batch of cascades: `(1/K) sum loss_k + r(theta)`.
pub fn batch_objective<F: Scalar>(
    params: &NmfParameters<F>,
    cases: &[(&[usize], &ObservationGrid)],
    reg: Option<RegWeights>,
) -> Result<F> {
    if cases.is_empty() {
        return Err(Error::NoData("empty batch".into()));
    }
    let mut total = F::zero();
    for (source, grid) in cases {
        let traj = crate::dynamics::forward(params, source, grid.steps)?;
        total += bce_loss(&traj, grid)?;
    }
    let mut mean = total / F::of(cases.len() as f64);
    if let Some(r) = reg {
        mean += regularizer(params, r);
    }
    Ok(mean)
}

/// Mean gradient over a batch of cascades including the regularizer
/// subgradient, built from per-cascade backward passes.
pub fn batch_gradient<F: Scalar>(
    params: &NmfParameters<F>,
    cases: &[(&[usize], &ObservationGrid)],
    reg: Option<RegWeights>,
) -> Result<GradientBundle<F>> {
    if cases.is_empty() {
        return Err(Error::NoData("empty batch".into()));
    }
    let mut acc: Option<GradientBundle<F>> = None;
    for (source, grid) in cases {
        let traj = crate::dynamics::forward(params, source, grid.steps)?;
        let (g, _) = backward_gradient(params, &traj, grid, None)?;
        match &mut acc {
            Some(a) => a.add_assign(&g),
            None => acc = Some(g),
        }
    }
    let mut acc = acc.expect("nonempty batch");
    acc.scale(F::of(1.0 / cases.len() as f64));
    if let Some(r) = reg {
        add_regularizer_subgradient(params, r, &mut acc);
    }
    Ok(acc)
}

/// Central finite differences of [`batch_objective`] over the flattened
/// parameters: the independent oracle the backward pass is checked against.
pub fn finite_diff_gradient(
    params: &NmfParameters<f64>,
    cases: &[(&[usize], &ObservationGrid)],
    reg: Option<RegWeights>,
    step: f64,
) -> Result<Array1<f64>> {
    let mut work = params.clone();
    let base = params.flatten();
    let mut grad = Array1::zeros(base.len());
    let mut theta = base.to_vec();
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        work.assign_flat(&theta);
        let up = batch_objective(&work, cases, reg)?;
        theta[i] = orig - step;
        work.assign_flat(&theta);
        let down = batch_objective(&work, cases, reg)?;
        theta[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    work.assign_flat(&theta);
    Ok(grad)
}

/// Largest relative disagreement between the backward gradient and the
/// finite-difference oracle, over entries with magnitude above `floor`.
pub fn max_relative_error(analytic: &Array1<f64>, numeric: &Array1<f64>, floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .filter(|(a, b)| a.abs() > floor || b.abs() > floor)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Column-batched backward pass used by the trainer.
// ---------------------------------------------------------------------------

fn mlp_backward_batch<F: Scalar>(
    mlp: &Mlp<F>,
    input: &Array2<F>,
    hidden: &[Array2<F>],
    gout: &Array2<F>,
    gw: &mut [Array2<F>],
    gb: &mut [Array1<F>],
) -> Array2<F> {
    let last = mlp.weights.len() - 1;
    let mut g = gout.clone();
    for l in (0..=last).rev() {
        if l < last {
            g.zip_mut_with(&hidden[l], |gi, &a| *gi *= F::one() - a * a);
        }
        let prev = if l == 0 { input } else { &hidden[l - 1] };
        gw[l] += &g.dot(&prev.t());
        gb[l] += &g.sum_axis(Axis(1));
        g = mlp.weights[l].t().dot(&g);
    }
    g
}

fn loss_grad_batch<F: Scalar>(x: &Array2<F>, target: &Array2<F>) -> Array2<F> {
    let mut g = Array2::zeros(x.raw_dim());
    for ((gi, &xi), &ti) in g.iter_mut().zip(x.iter()).zip(target.iter()) {
        *gi = (xi - ti) / (xi * (F::one() - xi));
    }
    g
}

/// Sum of per-column losses and the summed gradient bundle for a batched
/// trajectory. `targets[t]` holds the observed states at step `t + 1`, one
/// column per cascade.
pub fn backward_gradient_batch<F: Scalar>(
    params: &NmfParameters<F>,
    traj: &TrajectoryBatch<F>,
    targets: &[Array2<F>],
) -> Result<(GradientBundle<F>, F)> {
    let n = params.n();
    let horizon = traj.horizon();
    if targets.len() != horizon {
        return Err(Error::Dimension("need one target per step".into()));
    }
    let cols = traj.batch_size();
    let mut grads = GradientBundle::zeros_like(params);
    if horizon == 0 {
        return Ok((grads, F::zero()));
    }

    let mut loss = F::zero();
    for t in 1..=horizon {
        let x = &traj.states[t];
        let target = &targets[t - 1];
        for (&xi, &ti) in x.iter().zip(target.iter()) {
            loss -= if ti != F::zero() { xi.ln() } else { (F::one() - xi).ln() };
        }
    }

    let mut gx = loss_grad_batch(&traj.states[horizon], &targets[horizon - 1]);
    match &params.kernel {
        Kernel::Exp { feed, decay } => {
            let mut gh: Array2<F> = Array2::zeros((n, cols));
            for t in (0..horizon).rev() {
                let x = &traj.states[t];
                let h = &traj.memory[t];
                let x_next = &traj.states[t + 1];
                let mut a = gx.clone();
                let mut gh_through = gh.clone();
                let (gf, gd) = match &mut grads.kernel {
                    Kernel::Exp { feed: gf, decay: gd } => (gf, gd),
                    _ => unreachable!(),
                };
                for (l, (b, c)) in feed.iter().zip(decay).enumerate() {
                    a += &b.t().dot(&gh);
                    gf[l] += &gh.dot(&x_next.t());
                    gd[l] -= &gh.dot(&h.t());
                    gh_through -= &c.t().dot(&gh);
                }
                let gu = &a * &traj.clamp_pass[t];
                let mut weighted = gu.clone();
                weighted.zip_mut_with(x, |w, &xi| *w *= F::one() - xi);
                grads.rates += &weighted.dot(&x.t());
                let gx_drift = params.rates.t().dot(&weighted) - &(&traj.inflow[t] * &gu);
                let mut input = Array2::zeros((2 * n, cols));
                input.slice_mut(s![..n, ..]).assign(x);
                input.slice_mut(s![n.., ..]).assign(h);
                let gin = mlp_backward_batch(
                    &params.correction,
                    &input,
                    &traj.hidden[t],
                    &gu,
                    &mut grads.weights,
                    &mut grads.biases,
                );
                gx = &gu + &gx_drift + &gin.slice(s![..n, ..]);
                if t >= 1 {
                    gx += &loss_grad_batch(x, &targets[t - 1]);
                }
                gh = gh_through + gin.slice(s![n.., ..]);
            }
        }
        Kernel::Window { lags } => {
            let window = lags.len();
            let mut blocks: Vec<Array2<F>> = vec![Array2::zeros((n, cols)); window];
            blocks[0] = gx;
            for t in (0..horizon).rev() {
                let x = &traj.states[t];
                let h = &traj.memory[t];
                let gu = &blocks[0] * &traj.clamp_pass[t];
                let mut weighted = gu.clone();
                weighted.zip_mut_with(x, |w, &xi| *w *= F::one() - xi);
                grads.rates += &weighted.dot(&x.t());
                let gx_drift = params.rates.t().dot(&weighted) - &(&traj.inflow[t] * &gu);
                let mut input = Array2::zeros((2 * n, cols));
                input.slice_mut(s![..n, ..]).assign(x);
                input.slice_mut(s![n.., ..]).assign(h);
                let gin = mlp_backward_batch(
                    &params.correction,
                    &input,
                    &traj.hidden[t],
                    &gu,
                    &mut grads.weights,
                    &mut grads.biases,
                );
                let geps_x = gin.slice(s![..n, ..]).to_owned();
                let geps_h = gin.slice(s![n.., ..]).to_owned();
                let glags = match &mut grads.kernel {
                    Kernel::Window { lags } => lags,
                    _ => unreachable!(),
                };
                for (sft, gk) in glags.iter_mut().enumerate() {
                    if t >= sft {
                        let xs = &traj.states[t - sft];
                        for i in 0..n {
                            let mut acc = F::zero();
                            for c in 0..cols {
                                acc += geps_h[[i, c]] * xs[[i, c]];
                            }
                            gk[i] += acc;
                        }
                    }
                }
                let mut next_blocks: Vec<Array2<F>> = vec![Array2::zeros((n, cols)); window];
                for (sft, k) in lags.iter().enumerate() {
                    let mut contrib = Array2::zeros((n, cols));
                    for i in 0..n {
                        for c in 0..cols {
                            contrib[[i, c]] = k[i] * geps_h[[i, c]];
                        }
                    }
                    if sft + 1 < window {
                        contrib += &blocks[sft + 1];
                    }
                    next_blocks[sft] = contrib;
                }
                next_blocks[0] += &gu;
                next_blocks[0] += &gx_drift;
                next_blocks[0] += &geps_x;
                if t >= 1 {
                    next_blocks[0] += &loss_grad_batch(x, &targets[t - 1]);
                }
                blocks = next_blocks;
            }
        }
    }
    grads.respect_support(params);
    Ok((grads, loss))
}
