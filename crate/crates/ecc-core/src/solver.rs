//! The energy-constrained compression solver: an augmented-Lagrangian loop
//! that alternates a proximal Adam update of the weights, a gradient-descent
//! update of the per-layer sparsity bounds, and projected dual ascent on the
//! two constraint multipliers, with stabilization rules that keep the energy
//! estimate monotonically nonincreasing.

use crate::energy::{BilinearEnergyModel, EnergyError, SparsityVector};
use crate::network::{
    apply_mask, forward, loss_and_grad, BatchStream, ChannelMask, Dataset, Distillation,
    LayerGrads, Network, NetworkError,
};
use crate::tensor::{channel_slice_norm_sq, DiagPreconditioner, Tensor4, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(
        "budget {budget} J is below the minimum achievable estimate {min_energy} J at the sparsity lower bounds"
    )]
    InfeasibleBudget { budget: f64, min_energy: f64 },
    #[error("constraints not satisfied after {iterations} iterations")]
    MaxIterations {
        iterations: usize,
        trace: Vec<TraceRow>,
    },
    #[error("mask marks layer {layer} channel {channel} active={active} but the weights disagree")]
    MaskInconsistent {
        layer: usize,
        channel: usize,
        active: bool,
    },
    #[error("config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Sparsity learning rate: either fixed, or calibrated so the initial energy
/// gap closes linearly over a fraction of the iteration budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaMode {
    Manual(f64),
    Auto { fraction: f64 },
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Energy budget in joules.
    pub budget: f64,
    /// Primal (Adam) learning rate, also the prox step size.
    pub alpha: f64,
    /// Sparsity learning rate.
    pub beta: BetaMode,
    /// Penalty weight and dual learning rate for the sparsity constraints.
    pub rho1: f64,
    /// Penalty weight and dual learning rate for the energy constraint.
    pub rho2: f64,
    /// Margin for the dual z projection that forces energy progress.
    pub epsilon: f64,
    /// Per-layer lower bounds on s (at least 1 channel each).
    pub lower_bounds: Vec<f64>,
    pub max_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Channel norms at or below this count as zero in the sparsity function.
    pub zero_tol: f64,
    /// Extra primal-only steps after the constraints are met.
    pub grace_iters: usize,
}

impl SolverConfig {
    pub fn new(budget: f64, n_layers: usize) -> Self {
        SolverConfig {
            budget,
            alpha: 1e-2,
            beta: BetaMode::Auto { fraction: 0.8 },
            rho1: 1.0,
            rho2: 1.0,
            epsilon: 1e-3,
            lower_bounds: vec![1.0; n_layers],
            max_iters: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            zero_tol: 0.0,
            grace_iters: 0,
        }
    }

    fn validate(&self, n_layers: usize) -> Result<(), SolverError> {
        if self.alpha <= 0.0 || self.rho1 <= 0.0 || self.rho2 <= 0.0 || self.epsilon <= 0.0 {
            return Err(SolverError::BadConfig(
                "alpha, rho1, rho2, and epsilon must be positive".into(),
            ));
        }
        if self.lower_bounds.len() != n_layers {
            return Err(SolverError::BadConfig(format!(
                "{} lower bounds for {} layers",
                self.lower_bounds.len(),
                n_layers
            )));
        }
        if self.lower_bounds.iter().any(|&lb| lb < 1.0) {
            return Err(SolverError::BadConfig("lower bounds must be >= 1".into()));
        }
        if let BetaMode::Manual(b) = self.beta {
            if b <= 0.0 {
                return Err(SolverError::BadConfig("beta must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Nonnegative multipliers for the per-layer sparsity constraints and the
/// energy constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub y: Vec<f64>,
    pub z: f64,
}

impl DualState {
    pub fn zeros(n_layers: usize) -> Self {
        DualState {
            y: vec![0.0; n_layers],
            z: 0.0,
        }
    }
}

/// First/second-moment accumulators for every parameter; the second moment
/// defines the diagonal preconditioner used by the prox step.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_w: Vec<Tensor4>,
    v_w: Vec<Tensor4>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        AdamState {
            m_w: net
                .layers
                .iter()
                .map(|l| {
                    let (d, c, rh, rw) = l.weights.dims();
                    Tensor4::zeros(d, c, rh, rw)
                })
                .collect(),
            v_w: net
                .layers
                .iter()
                .map(|l| {
                    let (d, c, rh, rw) = l.weights.dims();
                    Tensor4::zeros(d, c, rh, rw)
                })
                .collect(),
            m_b: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            v_b: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of every parameter in place.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &[LayerGrads],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let gw = grads[l].weights.data();
            let m = self.m_w[l].data_mut();
            let v = self.v_w[l].data_mut();
            let w = layer.weights.data_mut();
            for k in 0..w.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gw[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * gw[k] * gw[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            let gb = &grads[l].bias;
            let mb = &mut self.m_b[l];
            let vb = &mut self.v_b[l];
            for k in 0..layer.bias.len() {
                mb[k] = beta1 * mb[k] + (1.0 - beta1) * gb[k];
                vb[k] = beta2 * vb[k] + (1.0 - beta2) * gb[k] * gb[k];
                let m_hat = mb[k] / bc1;
                let v_hat = vb[k] / bc2;
                layer.bias[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Diagonal preconditioner `B = sqrt(v_hat) + eps` over layer `l`'s
    /// weights, from the bias-corrected second moment.
    pub fn preconditioner(&self, l: usize, beta2: f64, eps: f64) -> DiagPreconditioner {
        let bc2 = 1.0 - beta2.powi(self.t.max(1) as i32);
        let entries: Vec<f64> = self.v_w[l]
            .data()
            .iter()
            .map(|&v| (v / bc2).sqrt() + eps)
            .collect();
        DiagPreconditioner::from_entries(self.v_w[l].dims(), entries, eps)
            .expect("shape matches by construction")
    }
}

fn positive_part(v: f64) -> f64 {
    v.max(0.0)
}

fn sparsity_vec(s: &[f64], n_out: usize) -> SparsityVector {
    SparsityVector::new(s.to_vec(), n_out)
}

/// Sparsity-constraint Lagrangian term over per-layer channel counts:
/// `rho1/2 sum_u [phi_u - s_u]_+^2 + sum_u y_u (phi_u - s_u)`.
pub fn lagrangian_l1(phi: &[usize], s: &[f64], y: &[f64], rho1: f64) -> f64 {
    let mut total = 0.0;
    for u in 0..phi.len() {
        let gap = phi[u] as f64 - s[u];
        total += 0.5 * rho1 * positive_part(gap).powi(2) + y[u] * gap;
    }
    total
}

/// Energy-constraint Lagrangian term:
/// `rho2/2 [E(s) - budget]_+^2 + z (E(s) - budget)`.
pub fn lagrangian_l2(
    s: &[f64],
    n_out: usize,
    z: f64,
    rho2: f64,
    model: &BilinearEnergyModel,
    budget: f64,
) -> Result<f64, EnergyError> {
    let gap = model.eval(&sparsity_vec(s, n_out))? - budget;
    Ok(0.5 * rho2 * positive_part(gap).powi(2) + z * gap)
}

/// Closed-form proximal operator for one layer: rank channels by B-weighted
/// squared norm and keep channel i exactly when
/// `a_i > rho1*alpha*([r_i - s]_+^2 - [r_i - 1 - s]_+^2) + 2*alpha*y`,
/// zeroing the rest. `threshold_scale` perturbs the keep threshold and
/// exists for negative-control verification; correct operation is 1.0.
pub fn prox_l1_layer_scaled(
    w_bar: &Tensor4,
    b: &DiagPreconditioner,
    s: f64,
    y: f64,
    alpha: f64,
    rho1: f64,
    threshold_scale: f64,
) -> Result<Tensor4, TensorError> {
    let c = w_bar.in_channels();
    let mut norms = Vec::with_capacity(c);
    for i in 0..c {
        norms.push(channel_slice_norm_sq(w_bar, i, b)?);
    }
    // descending by norm; stable sort keeps lower indices first on ties
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&p, &q| norms[q].partial_cmp(&norms[p]).expect("finite norms"));
    let mut rank = vec![0usize; c];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos + 1;
    }
    let mut out = w_bar.clone();
    for i in 0..c {
        let r = rank[i] as f64;
        let rank_cost = positive_part(r - s).powi(2) - positive_part(r - 1.0 - s).powi(2);
        let threshold = (rho1 * alpha * rank_cost + 2.0 * alpha * y) * threshold_scale;
        if norms[i] > threshold {
            continue;
        }
        // zero the slice; skip writes on channels that are already zero so
        // an inactive prox leaves the tensor bitwise untouched
        if norms[i] > 0.0 {
            out = crate::tensor::zero_channel(&out, i)?;
        }
    }
    Ok(out)
}

/// [`prox_l1_layer_scaled`] with the correct threshold.
pub fn prox_l1_layer(
    w_bar: &Tensor4,
    b: &DiagPreconditioner,
    s: f64,
    y: f64,
    alpha: f64,
    rho1: f64,
) -> Result<Tensor4, TensorError> {
    prox_l1_layer_scaled(w_bar, b, s, y, alpha, rho1, 1.0)
}

/// Applies the proximal operator to every layer of a candidate network.
pub fn prox_l1(
    net: &mut Network,
    adam: &AdamState,
    s: &[f64],
    y: &[f64],
    config: &SolverConfig,
) -> Result<(), SolverError> {
    for l in 0..net.layers.len() {
        let b = adam.preconditioner(l, config.adam_beta2, config.adam_eps);
        net.layers[l].weights = prox_l1_layer(
            &net.layers[l].weights,
            &b,
            s[l],
            y[l],
            config.alpha,
            config.rho1,
        )?;
    }
    Ok(())
}

/// One proximal Adam update: stochastic gradients of the loss on the batch,
/// an Adam step to the candidate weights, then the prox. With slack
/// constraints (`y = 0`, `s >= phi`) this is exactly a plain Adam step.
#[allow(clippy::too_many_arguments)]
pub fn primal_w_step(
    net: &mut Network,
    adam: &mut AdamState,
    batch: &crate::network::Batch,
    labels: &[usize],
    kd: Option<&Distillation>,
    s: &[f64],
    y: &[f64],
    config: &SolverConfig,
) -> Result<f64, SolverError> {
    let (loss, grads) = loss_and_grad(net, batch, labels, kd)?;
    adam.step(
        net,
        &grads,
        config.alpha,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    prox_l1(net, adam, s, y, config)?;
    Ok(loss)
}

/// Clamped gradient of the s-subproblem:
/// `g_u = clamp(-rho1 [phi_u - s_u]_+ - y_u + (rho2 [E(s) - budget]_+ + z) dE/ds_u, >= 0)`.
pub fn sparsity_gradient(
    phi: &[usize],
    s: &[f64],
    n_out: usize,
    y: &[f64],
    z: f64,
    model: &BilinearEnergyModel,
    config: &SolverConfig,
) -> Result<Vec<f64>, EnergyError> {
    let sv = sparsity_vec(s, n_out);
    let energy_gap = positive_part(model.eval(&sv)? - config.budget);
    let d_energy = model.grad_s(&sv)?;
    Ok((0..s.len())
        .map(|u| {
            let g = -config.rho1 * positive_part(phi[u] as f64 - s[u]) - y[u]
                + (config.rho2 * energy_gap + z) * d_energy[u];
            positive_part(g)
        })
        .collect())
}

/// One gradient-descent step on the sparsity bounds, floored at the
/// configured lower bounds. The clamped gradient is nonnegative, so the
/// bounds never increase.
pub fn sparsity_step(
    phi: &[usize],
    s: &[f64],
    n_out: usize,
    y: &[f64],
    z: f64,
    model: &BilinearEnergyModel,
    beta: f64,
    config: &SolverConfig,
) -> Result<Vec<f64>, EnergyError> {
    let g = sparsity_gradient(phi, s, n_out, y, z, model, config)?;
    Ok((0..s.len())
        .map(|u| (s[u] - beta * g[u]).max(config.lower_bounds[u]))
        .collect())
}

/// Projected dual ascent with the two stabilization rules: each `y_u` is
/// capped so the prox at the current weights would keep at least
/// `floor(s_u)` channels, and `z` is raised (while the energy constraint is
/// violated) to the smallest value that keeps the largest clamped s-gradient
/// component at least `epsilon`.
pub fn dual_step(
    net: &Network,
    adam: &AdamState,
    s: &[f64],
    duals: &DualState,
    model: &BilinearEnergyModel,
    config: &SolverConfig,
) -> Result<DualState, SolverError> {
    let phi = net.sparsities(config.zero_tol);
    let n_out = net.n_out();

    // ascent on y with nonnegative projection
    let mut y: Vec<f64> = (0..s.len())
        .map(|u| positive_part(duals.y[u] + config.rho1 * (phi[u] as f64 - s[u])))
        .collect();

    // trim: cap y_u at the level where the prox would still retain the
    // floor(s_u) highest-norm channels of the current weights
    for (u, layer) in net.layers.iter().enumerate() {
        let c = layer.weights.in_channels();
        let k = (s[u].floor() as usize).clamp(1, c);
        let b = adam.preconditioner(u, config.adam_beta2, config.adam_eps);
        let mut norms = Vec::with_capacity(c);
        for i in 0..c {
            norms.push(channel_slice_norm_sq(&layer.weights, i, &b)?);
        }
        norms.sort_by(|p, q| q.partial_cmp(p).expect("finite norms"));
        let kth = norms[k - 1];
        let rank_cost = positive_part(k as f64 - s[u]).powi(2)
            - positive_part(k as f64 - 1.0 - s[u]).powi(2);
        let cap = positive_part((kth - config.rho1 * config.alpha * rank_cost) / (2.0 * config.alpha));
        if y[u] > cap {
            y[u] = cap;
        }
    }

    // ascent on z with nonnegative projection
    let sv = sparsity_vec(s, n_out);
    let energy = model.eval(&sv)?;
    let mut z = positive_part(duals.z + config.rho2 * (energy - config.budget));

    // while the energy constraint is violated, project z up so the next
    // sparsity step makes at least epsilon progress somewhere
    if energy > config.budget {
        let d_energy = model.grad_s(&sv)?;
        let energy_gap = energy - config.budget;
        let mut z_required = f64::INFINITY;
        for u in 0..s.len() {
            if d_energy[u] > 0.0 {
                let needed = (config.epsilon
                    + config.rho1 * positive_part(phi[u] as f64 - s[u])
                    + y[u])
                    / d_energy[u]
                    - config.rho2 * energy_gap;
                z_required = z_required.min(needed);
            }
        }
        if z_required.is_finite() && z < z_required {
            z = positive_part(z_required);
        }
    }

    Ok(DualState { y, z })
}

/// One line of the per-iteration solver trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub energy: f64,
    pub max_phi_violation: f64,
    pub max_y: f64,
    pub z: f64,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CompressOutcome {
    pub network: Network,
    pub s: Vec<f64>,
    pub duals: DualState,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
}

fn resolve_beta(
    config: &SolverConfig,
    model: &BilinearEnergyModel,
    s0: &[f64],
    n_out: usize,
) -> Result<f64, SolverError> {
    match config.beta {
        BetaMode::Manual(b) => Ok(b),
        BetaMode::Auto { fraction } => {
            if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
                return Err(SolverError::BadConfig(
                    "beta auto fraction must be in (0, 1]".into(),
                ));
            }
            let d = model.grad_s(&sparsity_vec(s0, n_out))?;
            let slope_sq: f64 = d.iter().map(|v| v * v).sum();
            if slope_sq == 0.0 {
                // constant energy model: s never needs to move
                return Ok(0.0);
            }
            Ok(1.0 / (fraction * config.max_iters as f64 * config.rho2 * slope_sq))
        }
    }
}

/// Runs the compression loop from a dense network: initialize `s` at the
/// current layer sparsities with zero duals, then iterate the three updates
/// until the energy estimate meets the budget and every layer satisfies its
/// sparsity bound. Fails fast if the budget is below the estimate at the
/// sparsity lower bounds, and returns the trace on iteration exhaustion.
pub fn compress(
    dense: &Network,
    model: &BilinearEnergyModel,
    config: &SolverConfig,
    dataset: &Dataset,
    stream: &mut BatchStream,
    teacher: Option<(&Network, f64, f64)>,
) -> Result<CompressOutcome, SolverError> {
    let n_layers = dense.layers.len();
    config.validate(n_layers)?;
    let n_out = dense.n_out();

    let min_energy = model.eval(&sparsity_vec(&config.lower_bounds, n_out))?;
    if config.budget < min_energy {
        return Err(SolverError::InfeasibleBudget {
            budget: config.budget,
            min_energy,
        });
    }

    let mut net = dense.clone();
    let mut s: Vec<f64> = net
        .sparsities(config.zero_tol)
        .iter()
        .map(|&v| v as f64)
        .collect();
    let mut duals = DualState::zeros(n_layers);
    let mut adam = AdamState::new(&net);
    let beta = resolve_beta(config, model, &s, n_out)?;

    let mut trace = Vec::new();
    let mut iter = 0usize;
    loop {
        let energy = model.eval(&sparsity_vec(&s, n_out))?;
        let phi = net.sparsities(config.zero_tol);
        let satisfied = energy <= config.budget
            && phi.iter().zip(&s).all(|(&p, &sv)| p as f64 <= sv);
        if satisfied {
            break;
        }
        if iter >= config.max_iters {
            return Err(SolverError::MaxIterations {
                iterations: iter,
                trace,
            });
        }

        let (batch, labels) = stream.next_batch(dataset);
        let kd = match teacher {
            Some((teacher_net, lambda, temperature)) => Some(Distillation {
                teacher_logits: forward(teacher_net, &batch)?,
                lambda,
                temperature,
            }),
            None => None,
        };
        let loss = primal_w_step(
            &mut net,
            &mut adam,
            &batch,
            &labels,
            kd.as_ref(),
            &s,
            &duals.y,
            config,
        )?;
        let phi = net.sparsities(config.zero_tol);
        s = sparsity_step(&phi, &s, n_out, &duals.y, duals.z, model, beta, config)?;
        duals = dual_step(&net, &adam, &s, &duals, model, config)?;

        iter += 1;
        let energy_now = model.eval(&sparsity_vec(&s, n_out))?;
        let max_phi_violation = phi
            .iter()
            .zip(&s)
            .map(|(&p, &sv)| positive_part(p as f64 - sv))
            .fold(0.0, f64::max);
        trace.push(TraceRow {
            iter,
            loss,
            energy: energy_now,
            max_phi_violation,
            max_y: duals.y.iter().cloned().fold(0.0, f64::max),
            z: duals.z,
            s: s.clone(),
        });
    }

    // optional loss-recovery phase with constraints frozen
    for _ in 0..config.grace_iters {
        let (batch, labels) = stream.next_batch(dataset);
        let kd = match teacher {
            Some((teacher_net, lambda, temperature)) => Some(Distillation {
                teacher_logits: forward(teacher_net, &batch)?,
                lambda,
                temperature,
            }),
            None => None,
        };
        primal_w_step(
            &mut net,
            &mut adam,
            &batch,
            &labels,
            kd.as_ref(),
            &s,
            &duals.y,
            config,
        )?;
    }

    Ok(CompressOutcome {
        network: net,
        s,
        duals,
        trace,
        iterations: iter,
    })
}

/// Fine-tunes with the nonzero positions frozen: the mask must match the
/// network's zero pattern exactly, masked gradients stay zero, and the
/// channel structure (hence the energy estimate) is unchanged.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    net: &Network,
    mask: &ChannelMask,
    dataset: &Dataset,
    stream: &mut BatchStream,
    iterations: usize,
    learning_rate: f64,
    config: &SolverConfig,
    teacher: Option<(&Network, f64, f64)>,
) -> Result<Network, SolverError> {
    for (u, (layer, layer_mask)) in net.layers.iter().zip(&mask.layers).enumerate() {
        for (i, &active) in layer_mask.iter().enumerate() {
            let nonzero = layer.weights.channel_slice_norm(i)? > config.zero_tol;
            if active != nonzero {
                return Err(SolverError::MaskInconsistent {
                    layer: u,
                    channel: i,
                    active,
                });
            }
        }
    }
    let mut tuned = apply_mask(net, mask)?;
    let mut adam = AdamState::new(&tuned);
    for _ in 0..iterations {
        let (batch, labels) = stream.next_batch(dataset);
        let kd = match teacher {
            Some((teacher_net, lambda, temperature)) => Some(Distillation {
                teacher_logits: forward(teacher_net, &batch)?,
                lambda,
                temperature,
            }),
            None => None,
        };
        let (_, grads) = loss_and_grad(&tuned, &batch, &labels, kd.as_ref())?;
        adam.step(
            &mut tuned,
            &grads,
            learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
    }
    Ok(tuned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{synthetic_classification, Activation, LayerSpec};
    use crate::oracles::{brute_force_prox, prox_objective, ProxInstance};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_zero_when_tight_and_undamped() {
        assert_eq!(lagrangian_l1(&[3, 5], &[3.0, 5.0], &[0.0, 0.0], 1.0), 0.0);
    }

    #[test]
    fn l1_single_layer_hand_value() {
        // phi=5, s=3, y=2, rho1=1: 0.5*4 + 2*2 = 6
        assert_eq!(lagrangian_l1(&[5], &[3.0], &[2.0], 1.0), 6.0);
    }

    #[test]
    fn l1_slack_constraint_linear_term_only() {
        // phi=2, s=4, y=1: clamp inactive, 1 * (2-4) = -2
        assert_eq!(lagrangian_l1(&[2], &[4.0], &[1.0], 1.0), -2.0);
    }

    fn affine_model() -> BilinearEnergyModel {
        // one layer, a0=1, a1=2, s_out=3: E = 1 + 6 s_1
        BilinearEnergyModel::new(1.0, vec![2.0])
    }

    #[test]
    fn l2_zero_at_budget() {
        let model = affine_model();
        let s = [4.0];
        let budget = model.eval(&sparsity_vec(&s, 3)).unwrap();
        assert_eq!(lagrangian_l2(&s, 3, 5.0, 1.0, &model, budget).unwrap(), 0.0);
    }

    #[test]
    fn l2_hand_value_over_budget() {
        // E=49, budget=40, rho2=1, z=2: 0.5*81 + 2*9 = 58.5
        let model = BilinearEnergyModel::new(1.0, vec![2.0, 3.0]);
        let s = [2.0, 3.0];
        let v = lagrangian_l2(&s, 4, 2.0, 1.0, &model, 40.0).unwrap();
        assert_eq!(v, 58.5);
    }

    #[test]
    fn l2_under_budget_with_zero_dual_vanishes() {
        // E=30 < budget=40, z=0
        let model = BilinearEnergyModel::new(0.0, vec![1.0]);
        let s = [10.0]; // E = 10 * 3 = 30
        assert_eq!(lagrangian_l2(&s, 3, 0.0, 1.0, &model, 40.0).unwrap(), 0.0);
    }

    fn one_elem_layer(values: &[f64]) -> Tensor4 {
        Tensor4::from_vec(1, values.len(), 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn prox_keeps_documented_pattern() {
        // a = (5.0, 0.3, 0.01), alpha=0.1, rho1=1, y=0, s=1:
        // thresholds 0, 0.1, 0.3 -> keep, keep, zero
        let w = one_elem_layer(&[5.0f64.sqrt(), 0.3f64.sqrt(), 0.01f64.sqrt()]);
        let b = DiagPreconditioner::identity(1, 3, 1, 1);
        let out = prox_l1_layer(&w, &b, 1.0, 0.0, 0.1, 1.0).unwrap();
        assert_eq!(out.get(0, 0, 0, 0), w.get(0, 0, 0, 0));
        assert_eq!(out.get(0, 1, 0, 0), w.get(0, 1, 0, 0));
        assert_eq!(out.get(0, 2, 0, 0), 0.0);
    }

    #[test]
    fn prox_dual_raises_thresholds() {
        // same instance with y=2: thresholds gain 0.4, only a=5.0 survives
        let w = one_elem_layer(&[5.0f64.sqrt(), 0.3f64.sqrt(), 0.01f64.sqrt()]);
        let b = DiagPreconditioner::identity(1, 3, 1, 1);
        let out = prox_l1_layer(&w, &b, 1.0, 2.0, 0.1, 1.0).unwrap();
        assert_eq!(out.get(0, 0, 0, 0), w.get(0, 0, 0, 0));
        assert_eq!(out.get(0, 1, 0, 0), 0.0);
        assert_eq!(out.get(0, 2, 0, 0), 0.0);
    }

    #[test]
    fn prox_slack_bound_is_identity() {
        let w = one_elem_layer(&[0.5, 0.001, 2.0, 0.0]);
        let b = DiagPreconditioner::identity(1, 4, 1, 1);
        let out = prox_l1_layer(&w, &b, 4.0, 0.0, 0.5, 1.0).unwrap();
        assert_eq!(out, w);
    }

    fn random_prox_instance(rng: &mut ChaCha8Rng, max_c: usize) -> ProxInstance {
        let c = rng.random_range(1..=max_c);
        let d = rng.random_range(1..=3);
        let k = rng.random_range(1..=2);
        let n = d * c * k * k;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let b_entries: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
        let alphas = [1e-3, 1e-1, 1.0];
        let ys = [0.0, 0.5, 5.0];
        ProxInstance {
            w_bar: Tensor4::from_vec(d, c, k, k, data).unwrap(),
            b: DiagPreconditioner::from_entries((d, c, k, k), b_entries, 1e-12).unwrap(),
            s: rng.random_range(1..=c) as f64,
            y: ys[rng.random_range(0..ys.len())],
            alpha: alphas[rng.random_range(0..alphas.len())],
            rho1: 1.0,
        }
    }

    #[test]
    fn prox_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..60 {
            let inst = random_prox_instance(&mut rng, 8);
            let fast = prox_l1_layer(&inst.w_bar, &inst.b, inst.s, inst.y, inst.alpha, inst.rho1)
                .unwrap();
            let exact = brute_force_prox(&inst).unwrap();
            assert_eq!(fast, exact.minimizer);
            let gap = prox_objective(&inst, &fast) - exact.objective;
            assert!(gap.abs() <= 1e-8, "objective gap {gap}");
        }
    }

    #[test]
    fn corrupted_threshold_is_caught_by_the_oracle() {
        // negative control: scaling the keep threshold flips a decision on
        // at least one instance, and the brute-force comparison reports it
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let mut mismatches = 0;
        for _ in 0..40 {
            let inst = random_prox_instance(&mut rng, 6);
            let corrupted = prox_l1_layer_scaled(
                &inst.w_bar,
                &inst.b,
                inst.s,
                inst.y,
                inst.alpha,
                inst.rho1,
                3.0,
            )
            .unwrap();
            let exact = brute_force_prox(&inst).unwrap();
            if corrupted != exact.minimizer {
                mismatches += 1;
            }
        }
        assert!(mismatches > 0, "corrupted threshold was never detected");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn prox_never_beats_or_loses_to_brute_force(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_prox_instance(&mut rng, 6);
            let fast = prox_l1_layer(&inst.w_bar, &inst.b, inst.s, inst.y, inst.alpha, inst.rho1)
                .unwrap();
            let exact = brute_force_prox(&inst).unwrap();
            let gap = prox_objective(&inst, &fast) - exact.objective;
            prop_assert!(gap.abs() <= 1e-8);
        }
    }

    #[test]
    fn sparsity_gradient_vanishes_when_all_slack() {
        let model = affine_model();
        let config = SolverConfig::new(100.0, 1);
        // phi <= s, y = 0, z = 0, E(s)=1+6*4=25 <= 100
        let g = sparsity_gradient(&[4], &[4.0], 3, &[0.0], 0.0, &model, &config).unwrap();
        assert_eq!(g, vec![0.0]);
        let s2 = sparsity_step(&[4], &[4.0], 3, &[0.0], 0.0, &model, 0.1, &config).unwrap();
        assert_eq!(s2, vec![4.0]);
    }

    #[test]
    fn sparsity_step_hand_value() {
        // single layer: phi=s=5, y=0, z=1, dE/ds=6, E-budget=9, rho2=1,
        // beta=0.1 -> g = (9+1)*6 = 60, s' = 5 - 6 floored at 1
        let model = BilinearEnergyModel::new(1.0, vec![2.0]); // dE/ds1 = 2*3 = 6
        let mut config = SolverConfig::new(0.0, 1);
        config.budget = model.eval(&sparsity_vec(&[5.0], 3)).unwrap() - 9.0;
        let g = sparsity_gradient(&[5], &[5.0], 3, &[0.0], 1.0, &model, &config).unwrap();
        assert_eq!(g, vec![60.0]);
        let s2 = sparsity_step(&[5], &[5.0], 3, &[0.0], 1.0, &model, 0.1, &config).unwrap();
        assert_eq!(s2, vec![1.0]); // 5 - 6 clamped to the lower bound
    }

    proptest! {
        #[test]
        fn sparsity_step_never_increases_s(
            s in proptest::collection::vec(1.0f64..20.0, 3),
            y in proptest::collection::vec(0.0f64..5.0, 3),
            z in 0.0f64..10.0,
            phi in proptest::collection::vec(1usize..20, 3),
            budget in 0.1f64..500.0,
        ) {
            let model = BilinearEnergyModel::new(0.5, vec![0.3, 0.1, 0.7]);
            let mut config = SolverConfig::new(budget, 3);
            config.rho1 = 2.0;
            config.rho2 = 0.5;
            let s2 = sparsity_step(&phi, &s, 4, &y, z, &model, 0.05, &config).unwrap();
            for u in 0..3 {
                prop_assert!(s2[u] <= s[u]);
                prop_assert!(s2[u] >= config.lower_bounds[u]);
            }
        }
    }

    fn tiny_net(seed: u64) -> Network {
        let specs = vec![
            LayerSpec::conv(2, 4, (3, 3), 1, 0, Activation::Relu),
            LayerSpec::fully_connected(4, 3, Activation::None),
        ];
        Network::random_init(&specs, seed).unwrap()
    }

    #[test]
    fn dual_y_clamps_at_zero() {
        // phi=4, s=6, y=0.5, rho1=1 -> [0.5 - 2]_+ = 0
        let net = tiny_net(1);
        let adam = AdamState::new(&net);
        let model = BilinearEnergyModel::new(0.0, vec![0.1, 0.1]);
        let config = SolverConfig::new(1e9, 2);
        // both layers fully dense: phi = (2, 4); pick s well above phi
        let duals = DualState {
            y: vec![0.5, 0.5],
            z: 0.0,
        };
        let out = dual_step(&net, &adam, &[6.0, 6.0], &duals, &model, &config).unwrap();
        assert_eq!(out.y, vec![0.0, 0.0]);
        assert!(out.z >= 0.0);
    }

    #[test]
    fn dual_z_ascends_by_energy_gap() {
        // E=49, budget=40, z=0, rho2=1 -> 9 before the epsilon projection,
        // which leaves it alone because the s-gradient is already large
        let net = tiny_net(2);
        let adam = AdamState::new(&net);
        let model = BilinearEnergyModel::new(1.0, vec![2.0, 3.0]);
        let mut config = SolverConfig::new(40.0, 2);
        config.epsilon = 1e-3;
        let s = [2.0, 3.0]; // E(s) with n_out=3: 1 + 2*6 + 3*9 = 40... recompute below
        let n_out = net.n_out();
        let energy = model.eval(&sparsity_vec(&s, n_out)).unwrap();
        config.budget = energy - 9.0;
        let duals = DualState::zeros(2);
        let out = dual_step(&net, &adam, &s, &duals, &model, &config).unwrap();
        assert!((out.z - 9.0).abs() < 1e-12, "z = {}", out.z);
    }

    #[test]
    fn dual_z_stays_zero_when_budget_met() {
        let net = tiny_net(3);
        let adam = AdamState::new(&net);
        let model = BilinearEnergyModel::new(0.0, vec![1.0, 1.0]);
        let s = [1.0, 1.0];
        let energy = model.eval(&sparsity_vec(&s, net.n_out())).unwrap();
        let config = SolverConfig::new(energy + 10.0, 2);
        let duals = DualState::zeros(2);
        let out = dual_step(&net, &adam, &s, &duals, &model, &config).unwrap();
        assert_eq!(out.z, 0.0);
    }

    #[test]
    fn dual_z_projection_guarantees_progress_margin() {
        // make the raw ascent step tiny, then check the projected z yields
        // max clamped s-gradient >= epsilon
        let net = tiny_net(4);
        let adam = AdamState::new(&net);
        let model = BilinearEnergyModel::new(0.0, vec![1e-4, 1e-4]);
        let s: Vec<f64> = net
            .sparsities(0.0)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let energy = model.eval(&sparsity_vec(&s, net.n_out())).unwrap();
        let mut config = SolverConfig::new(energy * 0.999, 2); // tiny violation
        config.epsilon = 1e-3;
        let duals = DualState::zeros(2);
        let out = dual_step(&net, &adam, &s, &duals, &model, &config).unwrap();
        let phi = net.sparsities(config.zero_tol);
        let g = sparsity_gradient(&phi, &s, net.n_out(), &out.y, out.z, &model, &config).unwrap();
        let max_g = g.iter().cloned().fold(0.0, f64::max);
        assert!(
            max_g >= config.epsilon - 1e-12,
            "max clamped gradient {max_g} below epsilon"
        );
    }

    #[test]
    fn dual_y_trim_preserves_floor_s_channels() {
        // push y absurdly high via a huge violation, then verify the prox at
        // the trimmed y keeps at least floor(s) channels per layer
        let net = tiny_net(5);
        let mut adam = AdamState::new(&net);
        // advance adam once so the preconditioner is not uniform
        let grads: Vec<LayerGrads> = net
            .layers
            .iter()
            .map(|l| {
                let (d, c, rh, rw) = l.weights.dims();
                let data: Vec<f64> = (0..d * c * rh * rw)
                    .map(|i| 0.01 + (i % 7) as f64 * 0.003)
                    .collect();
                LayerGrads {
                    weights: Tensor4::from_vec(d, c, rh, rw, data).unwrap(),
                    bias: vec![0.001; l.bias.len()],
                }
            })
            .collect();
        let mut probe = net.clone();
        adam.step(&mut probe, &grads, 1e-3, 0.9, 0.999, 1e-8);

        let model = BilinearEnergyModel::new(0.0, vec![1.0, 1.0]);
        let config = SolverConfig::new(1e9, 2);
        let s = [1.0, 2.0];
        let duals = DualState {
            y: vec![1e6, 1e6],
            z: 0.0,
        };
        let out = dual_step(&net, &adam, &s, &duals, &model, &config).unwrap();
        for (u, layer) in net.layers.iter().enumerate() {
            let k = s[u].floor() as usize;
            let b = adam.preconditioner(u, config.adam_beta2, config.adam_eps);
            // slightly inside the cap the prox must keep at least k channels
            let kept = prox_l1_layer(
                &layer.weights,
                &b,
                s[u],
                out.y[u] * (1.0 - 1e-9),
                config.alpha,
                config.rho1,
            )
            .unwrap();
            let survivors = crate::tensor::layer_sparsity(&kept, 0.0);
            assert!(
                survivors >= k,
                "layer {u}: {survivors} survivors < floor(s) = {k}"
            );
        }
    }

    #[test]
    fn zero_gradient_step_reduces_to_pruning() {
        // zero input and zero biases give exactly zero weight gradients, so
        // the candidate equals the current weights and the step is pure
        // pruning; the brute-force oracle confirms the kept pattern
        let specs = vec![
            LayerSpec::conv(2, 3, (2, 2), 1, 0, Activation::Relu),
            LayerSpec::fully_connected(3, 2, Activation::None),
        ];
        let net = Network::random_init(&specs, 33).unwrap();
        let mut pruned = net.clone();
        let mut adam = AdamState::new(&pruned);
        let config = {
            let mut c = SolverConfig::new(1e9, 2);
            c.alpha = 0.05;
            c
        };
        let batch = crate::network::Batch::zeros(4, 2, 2, 2);
        let labels = vec![0, 1, 0, 1];
        let y = [3.0, 3.0];
        let s = [1.0, 1.0];
        primal_w_step(
            &mut pruned,
            &mut adam,
            &batch,
            &labels,
            None,
            &s,
            &y,
            &config,
        )
        .unwrap();
        for (u, (before, after)) in net.layers.iter().zip(pruned.layers.iter()).enumerate() {
            let b = adam.preconditioner(u, config.adam_beta2, config.adam_eps);
            let inst = ProxInstance {
                w_bar: before.weights.clone(),
                b,
                s: s[u],
                y: y[u],
                alpha: config.alpha,
                rho1: config.rho1,
            };
            let exact = brute_force_prox(&inst).unwrap();
            assert_eq!(after.weights, exact.minimizer, "layer {u}");
        }
    }

    #[test]
    fn slack_primal_step_is_bitwise_plain_adam() {
        let net = tiny_net(6);
        let ds = synthetic_classification(2, 3, 3, 3, 24, 0.3, 6, 0);
        let config = SolverConfig::new(1e9, 2);
        let s: Vec<f64> = net
            .sparsities(0.0)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let y = vec![0.0, 0.0];

        let mut solver_net = net.clone();
        let mut solver_adam = AdamState::new(&solver_net);
        let mut plain_net = net.clone();
        let mut plain_adam = AdamState::new(&plain_net);
        let mut stream_a = BatchStream::new(ds.n, 8, 9);
        let mut stream_b = BatchStream::new(ds.n, 8, 9);

        for _ in 0..10 {
            let (batch, labels) = stream_a.next_batch(&ds);
            primal_w_step(
                &mut solver_net,
                &mut solver_adam,
                &batch,
                &labels,
                None,
                &s,
                &y,
                &config,
            )
            .unwrap();

            let (batch_b, labels_b) = stream_b.next_batch(&ds);
            let (_, grads) = loss_and_grad(&plain_net, &batch_b, &labels_b, None).unwrap();
            plain_adam.step(
                &mut plain_net,
                &grads,
                config.alpha,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            );
        }
        for (a, b) in solver_net.layers.iter().zip(plain_net.layers.iter()) {
            assert_eq!(a.weights.data(), b.weights.data());
            assert_eq!(a.bias, b.bias);
        }
    }

    fn toy_setup() -> (Network, Dataset, BilinearEnergyModel) {
        let specs = vec![
            LayerSpec::conv(2, 6, (3, 3), 1, 1, Activation::Relu),
            LayerSpec::conv(6, 8, (4, 4), 1, 0, Activation::Relu),
            LayerSpec::fully_connected(8, 3, Activation::None),
        ];
        let net = Network::random_init(&specs, 91).unwrap();
        let ds = synthetic_classification(2, 4, 4, 3, 60, 0.3, 91, 0);
        // operation-count-flavored hidden coefficients
        let model = BilinearEnergyModel::new(0.05, vec![0.02, 0.01, 0.004]);
        (net, ds, model)
    }

    #[test]
    fn compress_satisfies_both_constraints() {
        let (net, ds, model) = toy_setup();
        let n_out = net.n_out();
        let dense_energy = model
            .eval(&net.sparsity_vector(0.0))
            .unwrap();
        let mut config = SolverConfig::new(dense_energy * 0.6, 3);
        config.max_iters = 600;
        config.alpha = 1e-2;
        config.rho1 = 5.0;
        let mut stream = BatchStream::new(ds.n, 12, 5);
        let out = compress(&net, &model, &config, &ds, &mut stream, None).unwrap();

        let final_energy = model.eval(&sparsity_vec(&out.s, n_out)).unwrap();
        assert!(final_energy <= config.budget);
        let phi = out.network.sparsities(0.0);
        for (u, (&p, &sv)) in phi.iter().zip(&out.s).enumerate() {
            assert!(p as f64 <= sv, "layer {u}: phi {p} > s {sv}");
        }
        // monotone trace
        for pair in out.trace.windows(2) {
            assert!(pair[1].energy <= pair[0].energy + 1e-12);
            for u in 0..3 {
                assert!(pair[1].s[u] <= pair[0].s[u] + 1e-12);
            }
        }
        for row in &out.trace {
            assert!(row.max_y >= 0.0 && row.z >= 0.0);
        }
    }

    #[test]
    fn compress_feasible_budget_returns_dense_network() {
        let (net, ds, model) = toy_setup();
        let dense_energy = model.eval(&net.sparsity_vector(0.0)).unwrap();
        let config = SolverConfig::new(dense_energy * 1.1, 3);
        let mut stream = BatchStream::new(ds.n, 12, 5);
        let out = compress(&net, &model, &config, &ds, &mut stream, None).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.network, net);
    }

    #[test]
    fn compress_rejects_unreachable_budget() {
        let (net, ds, model) = toy_setup();
        let min_energy = model
            .eval(&SparsityVector::new(vec![1.0, 1.0, 1.0], net.n_out()))
            .unwrap();
        let config = SolverConfig::new(min_energy * 0.5, 3);
        let mut stream = BatchStream::new(ds.n, 12, 5);
        match compress(&net, &model, &config, &ds, &mut stream, None) {
            Err(SolverError::InfeasibleBudget { budget, min_energy: m }) => {
                assert!(budget < m);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn finetune_zero_iterations_keeps_weights() {
        let (net, ds, _) = toy_setup();
        let mask = ChannelMask::from_network_zeros(&net, 0.0);
        let config = SolverConfig::new(1.0, 3);
        let mut stream = BatchStream::new(ds.n, 12, 7);
        let tuned = finetune(&net, &mask, &ds, &mut stream, 0, 1e-3, &config, None).unwrap();
        for (a, b) in net.layers.iter().zip(tuned.layers.iter()) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn finetune_keeps_masked_channels_at_zero() {
        let (net, ds, _) = toy_setup();
        let mut mask = ChannelMask::from_network_zeros(&net, 0.0);
        mask.layers[1][2] = false;
        mask.layers[1][5] = false;
        let pruned = apply_mask(&net, &mask).unwrap();
        let config = SolverConfig::new(1.0, 3);
        let mut stream = BatchStream::new(ds.n, 12, 7);
        let tuned = finetune(&pruned, &mask, &ds, &mut stream, 100, 1e-2, &config, None).unwrap();
        for &ch in &[2usize, 5] {
            for idx in tuned.layers[1].weights.channel_slice_indices(ch) {
                assert_eq!(tuned.layers[1].weights.data()[idx], 0.0);
            }
        }
        // the active channels did train
        assert_ne!(tuned.layers[0].weights, pruned.layers[0].weights);
    }

    #[test]
    fn finetune_rejects_inconsistent_mask() {
        let (net, ds, _) = toy_setup();
        let mut mask = ChannelMask::from_network_zeros(&net, 0.0);
        mask.layers[0][0] = false; // claims zero but the channel is nonzero
        let config = SolverConfig::new(1.0, 3);
        let mut stream = BatchStream::new(ds.n, 12, 7);
        assert!(matches!(
            finetune(&net, &mask, &ds, &mut stream, 1, 1e-3, &config, None),
            Err(SolverError::MaskInconsistent { .. })
        ));
    }

    #[test]
    fn finetune_loss_trends_down_on_fixed_batch() {
        let (net, ds, _) = toy_setup();
        let mask = ChannelMask::from_network_zeros(&net, 0.0);
        let config = SolverConfig::new(1.0, 3);
        let (batch, labels) = ds.batch(&(0..12).collect::<Vec<_>>());
        let (before, _) = loss_and_grad(&net, &batch, &labels, None).unwrap();
        let mut stream = BatchStream::new(12, 12, 7); // single fixed batch
        let small = Dataset {
            n: 12,
            c: ds.c,
            h: ds.h,
            w: ds.w,
            n_classes: ds.n_classes,
            features: ds.features[..12 * ds.sample_len()].to_vec(),
            labels: ds.labels[..12].to_vec(),
        };
        let tuned = finetune(&net, &mask, &small, &mut stream, 200, 1e-2, &config, None).unwrap();
        let (after, _) = loss_and_grad(&tuned, &batch, &labels, None).unwrap();
        assert!(
            after < before,
            "loss did not improve: {before} -> {after}"
        );
    }
}
