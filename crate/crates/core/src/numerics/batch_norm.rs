use crate::error::{Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Learned affine parameters and running statistics of a batch-norm layer
/// acting on `dim`-dimensional rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Folds the statistics of one train-mode batch into the running
    /// estimates. The running variance uses the unbiased estimator.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let Some(stats) = &cache.batch_stats else {
            return;
        };
        let n = cache.rows as f64;
        let correction = n / (n - 1.0);
        for d in 0..self.dim() {
            self.running_mean[d] =
                (1.0 - BATCH_NORM_MOMENTUM) * self.running_mean[d] + BATCH_NORM_MOMENTUM * stats.mean[d];
            self.running_var[d] =
                (1.0 - BATCH_NORM_MOMENTUM) * self.running_var[d] + BATCH_NORM_MOMENTUM * stats.var[d] * correction;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

/// Values retained by [`batch_norm_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    rows: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: Option<BatchStats>,
}

impl BatchNormCache {
    pub fn batch_stats(&self) -> Option<&BatchStats> {
        self.batch_stats.as_ref()
    }
}

/// Normalizes each column of a `rows x dim` row-major batch. Does not touch
/// the running statistics; see [`BatchNormState::update_running`].
pub fn batch_norm_forward(x: &[f64], state: &BatchNormState, mode: NormMode) -> Result<(Vec<f64>, BatchNormCache)> {
    let dim = state.dim();
    if dim == 0 || !x.len().is_multiple_of(dim) {
        return Err(Error::shape(
            "batch_norm",
            format!("{} values do not form rows of width {dim}", x.len()),
        ));
    }
    let rows = x.len() / dim;
    let (mean, var, batch_stats) = match mode {
        NormMode::Train => {
            if rows < 2 {
                return Err(Error::invalid(format!(
                    "batch norm in train mode needs at least 2 rows, got {rows}"
                )));
            }
            let mut mean = vec![0.0; dim];
            for row in x.chunks(dim) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; dim];
            for row in x.chunks(dim) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
            };
            (mean, var, Some(stats))
        }
        NormMode::Infer => (state.running_mean.clone(), state.running_var.clone(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(dim) {
        for d in 0..dim {
            let n = (row[d] - mean[d]) * inv_std[d];
            normalized.push(n);
            out.push(state.gamma[d] * n + state.beta[d]);
        }
    }
    Ok((
        out,
        BatchNormCache {
            rows,
            normalized,
            inv_std,
            batch_stats,
        },
    ))
}

/// Forward pass that also updates the running statistics in train mode.
pub fn batch_norm(x: &[f64], state: &mut BatchNormState, mode: NormMode) -> Result<Vec<f64>> {
    let (out, cache) = batch_norm_forward(x, state, mode)?;
    state.update_running(&cache);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn batch_norm_backward(grad_out: &[f64], cache: &BatchNormCache, state: &BatchNormState) -> Result<BatchNormGrads> {
    let dim = state.dim();
    if grad_out.len() != cache.normalized.len() {
        return Err(Error::shape(
            "batch_norm_backward",
            format!(
                "{} upstream values for {} cached",
                grad_out.len(),
                cache.normalized.len()
            ),
        ));
    }
    let rows = cache.rows as f64;
    let mut grad_gamma = vec![0.0; dim];
    let mut grad_beta = vec![0.0; dim];
    for (g_row, n_row) in grad_out.chunks(dim).zip(cache.normalized.chunks(dim)) {
        for d in 0..dim {
            grad_gamma[d] += g_row[d] * n_row[d];
            grad_beta[d] += g_row[d];
        }
    }
    let mut grad_in = Vec::with_capacity(grad_out.len());
    match cache.batch_stats {
        Some(_) => {
            // d x = inv_std / N * (N * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
            // with dxhat = gamma * dy, so the sums are gamma * grad_beta and
            // gamma * grad_gamma.
            for (g_row, n_row) in grad_out.chunks(dim).zip(cache.normalized.chunks(dim)) {
                for d in 0..dim {
                    let dxhat = state.gamma[d] * g_row[d];
                    let sum_dxhat = state.gamma[d] * grad_beta[d];
                    let sum_dxhat_xhat = state.gamma[d] * grad_gamma[d];
                    grad_in.push(cache.inv_std[d] / rows * (rows * dxhat - sum_dxhat - n_row[d] * sum_dxhat_xhat));
                }
            }
        }
        None => {
            for g_row in grad_out.chunks(dim) {
                grad_in.extend(
                    g_row
                        .iter()
                        .zip(&state.gamma)
                        .zip(&cache.inv_std)
                        .map(|((g, gamma), s)| g * gamma * s),
                );
            }
        }
    }
    Ok(BatchNormGrads {
        input: grad_in,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair_is_already_standardized() {
        let state = BatchNormState::new(1);
        let (out, _) = batch_norm_forward(&[-1.0, 1.0], &state, NormMode::Train).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-5);
        assert!((out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_batch_maps_to_zero() {
        let state = BatchNormState::new(2);
        let (out, _) = batch_norm_forward(&[3.0, -2.0, 3.0, -2.0, 3.0, -2.0], &state, NormMode::Train).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_with_identity_state_is_identity() {
        let state = BatchNormState::new(3);
        let x = [0.5, -1.0, 2.0];
        let (out, _) = batch_norm_forward(&x, &state, NormMode::Infer).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let mut state = BatchNormState::new(2);
        assert!(batch_norm(&[1.0, 2.0], &mut state, NormMode::Train).is_err());
        assert!(batch_norm(&[1.0, 2.0], &mut state, NormMode::Infer).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut state = BatchNormState::new(1);
        batch_norm(&[1.0, 3.0], &mut state, NormMode::Train).unwrap();
        assert!((state.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((state.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
