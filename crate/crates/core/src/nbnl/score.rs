use super::bank::{validate_q, PrototypeBank};
use crate::descriptors::{DescriptorGrid, MultiScaleDescriptors};
use crate::error::{Error, Result};

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(sum_s max(0, <z, s>)^q)^(1/q)` without validation. The largest hinge
/// is factored out so large `q` neither overflows nor underflows.
pub(crate) fn omega_unchecked(z: &[f64], prototypes: &[f64], q: f64) -> f64 {
    let dim = z.len();
    let mut hinges = [0.0f64; 16];
    let mut heap = Vec::new();
    let count = prototypes.len() / dim;
    let r: &mut [f64] = if count <= hinges.len() {
        &mut hinges[..count]
    } else {
        heap.resize(count, 0.0);
        &mut heap
    };
    let mut max = 0.0f64;
    for (slot, s) in r.iter_mut().zip(prototypes.chunks(dim)) {
        *slot = dot(z, s).max(0.0);
        max = max.max(*slot);
    }
    if max == 0.0 {
        return 0.0;
    }
    let sum: f64 = r.iter().map(|&v| (v / max).powf(q)).sum();
    max * sum.powf(1.0 / q)
}

fn check_dims(z: &[f64], prototypes: &[f64]) -> Result<()> {
    if z.is_empty() || prototypes.is_empty() || !prototypes.len().is_multiple_of(z.len()) {
        return Err(Error::shape(
            "omega",
            format!(
                "descriptor of length {} against {} prototype values",
                z.len(),
                prototypes.len()
            ),
        ));
    }
    Ok(())
}

/// Hinge-rectified l_q score of descriptor `z` against a row-major
/// `p x dim` set of prototypes.
pub fn omega(z: &[f64], prototypes: &[f64], q: f64) -> Result<f64> {
    validate_q(q)?;
    check_dims(z, prototypes)?;
    Ok(omega_unchecked(z, prototypes, q))
}

/// Accumulates `upstream * d omega / d z` into `grad_z` and
/// `upstream * d omega / d s` into `grad_prototypes`. Inactive hinges and
/// `omega = 0` contribute nothing.
pub(crate) fn omega_backward_into(
    z: &[f64],
    prototypes: &[f64],
    q: f64,
    upstream: f64,
    grad_z: &mut [f64],
    grad_prototypes: &mut [f64],
) {
    let dim = z.len();
    let w = omega_unchecked(z, prototypes, q);
    if w == 0.0 || upstream == 0.0 {
        return;
    }
    for (s, gs) in prototypes.chunks(dim).zip(grad_prototypes.chunks_mut(dim)) {
        let r = dot(z, s);
        if r <= 0.0 {
            continue;
        }
        // omega^(1-q) r^(q-1), written as a ratio for stability
        let coeff = upstream * (r / w).powf(q - 1.0);
        for d in 0..dim {
            gs[d] += coeff * z[d];
            grad_z[d] += coeff * s[d];
        }
    }
}

/// Gradients of `upstream * omega(z, prototypes)`.
pub fn omega_backward(z: &[f64], prototypes: &[f64], q: f64, upstream: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    validate_q(q)?;
    check_dims(z, prototypes)?;
    let mut gz = vec![0.0; z.len()];
    let mut gs = vec![0.0; prototypes.len()];
    omega_backward_into(z, prototypes, q, upstream, &mut gz, &mut gs);
    Ok((gz, gs))
}

/// Per-class scores `omega(z, W_y)` of one descriptor.
pub fn class_scores(z: &[f64], bank: &PrototypeBank) -> Vec<f64> {
    let q = bank.config().q;
    (0..bank.classes())
        .map(|c| omega_unchecked(z, bank.class_prototypes(c), q))
        .collect()
}

/// Mean omega over the descriptors of one scale.
pub fn bar_omega(grid: &DescriptorGrid, prototypes: &[f64], q: f64) -> Result<f64> {
    if grid.eta() == 0 {
        return Err(Error::invalid("scale has no descriptors"));
    }
    validate_q(q)?;
    check_dims(grid.descriptors.get(0), prototypes)?;
    let sum: f64 = grid.descriptors.iter().map(|z| omega_unchecked(z, prototypes, q)).sum();
    Ok(sum / grid.eta() as f64)
}

/// Scale-averaged normalized score of an image for one class.
pub fn likelihood_h(descriptors: &MultiScaleDescriptors, prototypes: &[f64], q: f64) -> Result<f64> {
    if descriptors.scales.is_empty() {
        return Err(Error::invalid("no scales"));
    }
    let mut total = 0.0;
    for grid in &descriptors.scales {
        total += bar_omega(grid, prototypes, q)?;
    }
    Ok(total / descriptors.scales.len() as f64)
}

/// `h(x; W_y)` for every class.
pub fn likelihoods(descriptors: &MultiScaleDescriptors, bank: &PrototypeBank) -> Result<Vec<f64>> {
    if descriptors.dim() != bank.dim() {
        return Err(Error::shape(
            "likelihoods",
            format!(
                "descriptor dimension {} vs prototype dimension {}",
                descriptors.dim(),
                bank.dim()
            ),
        ));
    }
    (0..bank.classes())
        .map(|c| likelihood_h(descriptors, bank.class_prototypes(c), bank.config().q))
        .collect()
}

pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Label with the highest likelihood; ties resolve to the lowest label.
pub fn classify_nbnl(descriptors: &MultiScaleDescriptors, bank: &PrototypeBank) -> Result<usize> {
    Ok(argmax_first(&likelihoods(descriptors, bank)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::DescriptorSet;
    use crate::nbnl::NbnlConfig;

    #[test]
    fn omega_examples() {
        let z = [0.6, 0.8];
        assert!((omega(&z, &z, 3.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(omega(&[1.0, 0.0], &[-1.0, 0.0, 0.0, 1.0], 2.0).unwrap(), 0.0);
        // dot products 0.5 and 0.3
        let w = omega(&[1.0, 0.0], &[0.5, 0.0, 0.3, 0.9], 2.0).unwrap();
        assert!((w - 0.34f64.sqrt()).abs() < 1e-12);
        assert!((w - 0.583095).abs() < 1e-6);
        assert!(omega(&z, &z, 0.9).is_err());
        assert!(omega(&z, &[1.0, 2.0, 3.0], 2.0).is_err());
    }

    #[test]
    fn omega_large_q_is_stable() {
        let w = omega(&[1e-30, 0.0], &[1.0, 0.0, 0.5, 0.0], 300.0).unwrap();
        assert!(w > 0.0 && (w - 1e-30).abs() < 1e-40);
    }

    #[test]
    fn backward_examples() {
        let (gz, gs) = omega_backward(&[1.0, 0.0], &[-1.0, 0.0], 4.0, 1.0).unwrap();
        assert!(gz.iter().chain(&gs).all(|&v| v == 0.0));
        let z = [0.3, 0.4];
        let s = [0.5, 0.1];
        let (gz, gs) = omega_backward(&z, &s, 1.0, 1.0).unwrap();
        assert_eq!(gz, s.to_vec());
        assert_eq!(gs, z.to_vec());
    }

    #[test]
    fn bar_omega_and_h_are_means() {
        let proto = [1.0, 0.0];
        let grid = |rows: &[[f64; 2]]| {
            DescriptorGrid::new(1, rows.len(), DescriptorSet::from_rows(2, rows.iter()).unwrap()).unwrap()
        };
        let single = grid(&[[0.7, 0.2]]);
        assert_eq!(bar_omega(&single, &proto, 3.0).unwrap(), 0.7);
        let pair = grid(&[[0.2, 0.0], [0.6, 0.5]]);
        assert!((bar_omega(&pair, &proto, 3.0).unwrap() - 0.4).abs() < 1e-15);
        let doubled = grid(&[[0.2, 0.0], [0.6, 0.5], [0.2, 0.0], [0.6, 0.5]]);
        assert_eq!(
            bar_omega(&doubled, &proto, 3.0).unwrap(),
            bar_omega(&pair, &proto, 3.0).unwrap()
        );

        let ms = MultiScaleDescriptors::new(vec![grid(&[[0.1, 0.0]]), grid(&[[0.3, 0.0]])]).unwrap();
        assert!((likelihood_h(&ms, &proto, 2.0).unwrap() - 0.2).abs() < 1e-15);
        let one = MultiScaleDescriptors::new(vec![pair.clone()]).unwrap();
        assert_eq!(
            likelihood_h(&one, &proto, 3.0).unwrap(),
            bar_omega(&pair, &proto, 3.0).unwrap()
        );
        let dead = MultiScaleDescriptors::new(vec![grid(&[[-0.3, 0.0]])]).unwrap();
        assert_eq!(likelihood_h(&dead, &proto, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn classify_examples() {
        let cfg = NbnlConfig::new(10.0, 2, 2).unwrap();
        let q1 = [0.6, 0.8, 0.0];
        let q2 = [0.0, 0.0, 1.0];
        let query = MultiScaleDescriptors::single(DescriptorSet::from_rows(3, [q1, q2]).unwrap()).unwrap();
        // class 0 prototypes are orthogonal to both query descriptors
        let mut w = vec![0.8, -0.6, 0.0, -0.8, 0.6, 0.0];
        w.extend_from_slice(&q1);
        w.extend_from_slice(&q2);
        let bank = PrototypeBank::new(cfg, 3, w).unwrap();
        let h = likelihoods(&query, &bank).unwrap();
        assert_eq!(h[0], 0.0);
        assert!((h[1] - 1.0).abs() < 1e-12);
        assert_eq!(classify_nbnl(&query, &bank).unwrap(), 1);
        assert_eq!(classify_nbnl(&query.scaled(3.7), &bank).unwrap(), 1);

        let same = PrototypeBank::new(cfg, 3, [q1, q2, q1, q2].concat()).unwrap();
        assert_eq!(classify_nbnl(&query, &same).unwrap(), 0);
    }
}
