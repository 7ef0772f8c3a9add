//! Finite-difference verification of the hand-written backward passes.
//!
//! Each trial draws a random instance and a direction `v` over the
//! component's parameters, then compares the analytic directional derivative
//! `<g, v>` with the central difference `(f(x + h v) - f(x - h v)) / 2h`.
//! The direction is a unit vector along a Gaussian `r` plus `g` rescaled to the same length:
//! a purely random direction is nearly orthogonal to `g` in high dimension,
//! and the quotient then measures rounding noise rather than the gradient.
//! A wrong `g` still shows up through both terms.
//!
//! Instances where a ReLU changes sign inside the stencil, or a hinge comes
//! close to it, are redrawn: the function is not smooth there and no finite
//! difference can be expected to agree.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::descriptors::{DescriptorGrid, DescriptorSet, MultiScaleDescriptors};
use crate::error::{Error, Result};
use crate::fcn::{extract_levels_batch, fcn_backward_batch, FcnGrads, FcnModel, FcnTopology};
use crate::nbnl::{omega, omega_backward, surrogate_loss, NbnlConfig, PrototypeBank};
use crate::numerics::{conv2d, conv2d_backward, relu, relu_backward, NormMode, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
const MAX_REDRAWS: usize = 1000;
/// Kink-free reach required around an instance, in units of the step.
const KINK_MARGIN: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradComponent {
    Omega,
    SurrogateLoss,
    /// A bare convolution: a linear map of input, weights and bias.
    Linear,
    /// One layer (convolution + optional ReLU) of the tiny topology.
    Layer(usize),
    /// Tiny extractor with batch norm and normalization, plus the head.
    FullStack,
}

impl GradComponent {
    /// Every component, with one entry per layer of the tiny topology.
    pub fn all() -> Vec<GradComponent> {
        let mut v = vec![
            GradComponent::Omega,
            GradComponent::SurrogateLoss,
            GradComponent::Linear,
        ];
        v.extend((0..tiny_topology().layers.len()).map(GradComponent::Layer));
        v.push(GradComponent::FullStack);
        v
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            GradComponent::Omega | GradComponent::SurrogateLoss | GradComponent::Layer(_) => 1e-5,
            GradComponent::Linear => 1e-9,
            GradComponent::FullStack => 1e-4,
        }
    }
}

impl fmt::Display for GradComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradComponent::Omega => f.write_str("omega"),
            GradComponent::SurrogateLoss => f.write_str("surrogate_loss"),
            GradComponent::Linear => f.write_str("linear"),
            GradComponent::Layer(i) => write!(f, "layer{i}"),
            GradComponent::FullStack => f.write_str("full_stack"),
        }
    }
}

impl FromStr for GradComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omega" => Ok(GradComponent::Omega),
            "surrogate_loss" => Ok(GradComponent::SurrogateLoss),
            "linear" => Ok(GradComponent::Linear),
            "full_stack" => Ok(GradComponent::FullStack),
            other => {
                let layers = tiny_topology().layers.len();
                match other.strip_prefix("layer").and_then(|i| i.parse::<usize>().ok()) {
                    Some(i) if i < layers => Ok(GradComponent::Layer(i)),
                    _ => Err(Error::invalid(format!(
                        "unknown gradcheck component `{other}` (expected omega, surrogate_loss, linear, layer0..layer{}, full_stack)",
                        layers - 1
                    ))),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub component: GradComponent,
    pub max_relative_error: f64,
    pub trials: usize,
    /// Instances discarded because a kink fell inside the stencil.
    pub redraws: usize,
}

/// The small network used for the layer and full-stack checks.
pub fn tiny_topology() -> FcnTopology {
    let mut t = FcnTopology::with_layers(
        3,
        FcnTopology::parse_layers("3x4s1+relu,3x5s2+relu,1x6s1").expect("valid layers"),
    );
    t.normalize_descriptors = true;
    t.batch_norm_before_head = true;
    t
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-10);
    (analytic - numeric).abs() / scale
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], alpha: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + alpha * b).collect()
}

/// Signs of every hinge `<z, s>` between descriptors and prototypes.
fn hinge_pattern(descriptors: &[f64], prototypes: &[f64], dim: usize) -> Vec<bool> {
    descriptors
        .chunks(dim)
        .flat_map(|z| prototypes.chunks(dim).map(move |s| dot(z, s) > 0.0))
        .collect()
}

/// Sign patterns of the non-smooth points of a function.
#[derive(Clone, Debug, Default, PartialEq)]
struct Kinks {
    /// ReLU inputs: piecewise linear, only the stencil itself must be clean.
    relu: Vec<bool>,
    /// Hinges raised to `q`: strongly curved nearby when `q` is fractional.
    hinge: Vec<bool>,
}

/// Scalar function of a flat parameter vector.
trait Probe {
    fn params(&self) -> Vec<f64>;
    /// Value, gradient and kink pattern at `x`.
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Kinks)>;
}

fn directional_check(probe: &dyn Probe, rng: &mut impl Rng) -> Result<Option<f64>> {
    let x = probe.params();
    let (_, grad, kinks) = probe.eval(&x)?;
    let mut v = gaussian(rng, x.len());
    let (rn, gn) = (dot(&v, &v).sqrt(), dot(&grad, &grad).sqrt());
    if gn > 0.0 {
        v = axpy(&v, rn / gn, &grad);
    }
    let vn = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|c| *c /= vn);
    for reach in [-KINK_MARGIN, KINK_MARGIN] {
        if probe.eval(&axpy(&x, reach * FD_STEP, &v))?.2.hinge != kinks.hinge {
            return Ok(None);
        }
    }
    let (fp, _, kp) = probe.eval(&axpy(&x, FD_STEP, &v))?;
    let (fm, _, km) = probe.eval(&axpy(&x, -FD_STEP, &v))?;
    if kp != kinks || km != kinks {
        return Ok(None);
    }
    let numeric = (fp - fm) / (2.0 * FD_STEP);
    Ok(Some(relative_error(dot(&grad, &v), numeric)))
}

struct OmegaProbe {
    dim: usize,
    q: f64,
    x: Vec<f64>,
}

impl Probe for OmegaProbe {
    fn params(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Kinks)> {
        let (z, s) = x.split_at(self.dim);
        let value = omega(z, s, self.q)?;
        let (mut gz, gs) = omega_backward(z, s, self.q, 1.0)?;
        gz.extend(gs);
        let hinge = hinge_pattern(z, s, self.dim);
        Ok((
            value,
            gz,
            Kinks {
                hinge,
                ..Kinks::default()
            },
        ))
    }
}

fn random_q(rng: &mut impl Rng) -> f64 {
    [1.0, 1.5, 2.0, 3.0, 4.0, 10.0][rng.random_range(0..6)]
}

fn omega_probe(rng: &mut impl Rng) -> OmegaProbe {
    let dim = rng.random_range(2..8);
    let p = rng.random_range(1..5);
    let q = random_q(rng);
    let z = gaussian(rng, dim);
    let s: Vec<f64> = gaussian(rng, p * dim).iter().map(|v| v * 0.5).collect();
    let mut x = z;
    x.extend(s);
    OmegaProbe { dim, q, x }
}

struct SurrogateProbe {
    etas: Vec<usize>,
    dim: usize,
    config: NbnlConfig,
    label: usize,
    x: Vec<f64>,
}

impl SurrogateProbe {
    fn split(&self, x: &[f64]) -> Result<(MultiScaleDescriptors, PrototypeBank)> {
        let n_desc: usize = self.etas.iter().sum::<usize>() * self.dim;
        let (d, w) = x.split_at(n_desc);
        let mut grids = Vec::new();
        let mut offset = 0;
        for &eta in &self.etas {
            let set = DescriptorSet::new(self.dim, d[offset..offset + eta * self.dim].to_vec())?;
            grids.push(DescriptorGrid::new(1, eta, set)?);
            offset += eta * self.dim;
        }
        Ok((
            MultiScaleDescriptors::new(grids)?,
            PrototypeBank::new(self.config, self.dim, w.to_vec())?,
        ))
    }
}

impl Probe for SurrogateProbe {
    fn params(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Kinks)> {
        let (msd, bank) = self.split(x)?;
        let s = surrogate_loss(&msd, &bank, self.label)?;
        let mut grad: Vec<f64> = s.grad_descriptors.iter().flat_map(|g| g.as_slice().to_vec()).collect();
        grad.extend(s.grad_prototypes);
        let hinge = hinge_pattern(msd.flatten().as_slice(), bank.weights(), self.dim);
        Ok((
            s.value,
            grad,
            Kinks {
                hinge,
                ..Kinks::default()
            },
        ))
    }
}

fn surrogate_probe(rng: &mut impl Rng) -> Result<SurrogateProbe> {
    let dim = rng.random_range(2..7);
    let classes = rng.random_range(2..5);
    let p = rng.random_range(1..4);
    let config = NbnlConfig::new(random_q(rng), p, classes)?;
    let etas: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..5)).collect();
    let n_desc = etas.iter().sum::<usize>() * dim;
    let mut x = gaussian(rng, n_desc);
    x.extend(gaussian(rng, classes * p * dim).iter().map(|v| v * 0.4));
    Ok(SurrogateProbe {
        etas,
        dim,
        config,
        label: rng.random_range(0..classes),
        x,
    })
}

/// `f = <G, act(conv(x, W) + b)>` over input, weights and bias.
struct ConvProbe {
    input_dims: Vec<usize>,
    weight_dims: Vec<usize>,
    stride: usize,
    relu: bool,
    upstream: Vec<f64>,
    x: Vec<f64>,
}

impl Probe for ConvProbe {
    fn params(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Kinks)> {
        let ni: usize = self.input_dims.iter().product();
        let nw: usize = self.weight_dims.iter().product();
        let input = Tensor::new(self.input_dims.clone(), x[..ni].to_vec())?;
        let weights = Tensor::new(self.weight_dims.clone(), x[ni..ni + nw].to_vec())?;
        let bias = Tensor::new(vec![self.weight_dims[0]], x[ni + nw..].to_vec())?;
        let pre = conv2d(&input, &weights, Some(&bias), self.stride)?;
        let (out, pattern) = if self.relu {
            (relu(&pre), pre.data().iter().map(|&v| v > 0.0).collect())
        } else {
            (pre.clone(), Vec::new())
        };
        let value = dot(out.data(), &self.upstream);
        let mut g = Tensor::new(pre.dims().to_vec(), self.upstream.clone())?;
        if self.relu {
            g = relu_backward(&g, &pre)?;
        }
        let cg = conv2d_backward(&g, &input, &weights, self.stride, true)?;
        let mut grad = cg.input.into_data();
        grad.extend(cg.weights.into_data());
        grad.extend(cg.bias.into_data());
        Ok((
            value,
            grad,
            Kinks {
                relu: pattern,
                ..Kinks::default()
            },
        ))
    }
}

fn conv_probe(
    rng: &mut impl Rng,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    relu: bool,
) -> ConvProbe {
    let h = kernel + stride * rng.random_range(1..4);
    let w = kernel + stride * rng.random_range(1..4);
    let input_dims = vec![in_channels, h, w];
    let weight_dims = vec![out_channels, in_channels, kernel, kernel];
    let out = out_channels * ((h - kernel) / stride + 1) * ((w - kernel) / stride + 1);
    let mut x = gaussian(rng, in_channels * h * w);
    x.extend(gaussian(rng, out_channels * in_channels * kernel * kernel));
    x.extend(gaussian(rng, out_channels));
    ConvProbe {
        input_dims,
        weight_dims,
        stride,
        relu,
        upstream: gaussian(rng, out),
        x,
    }
}

/// Summed surrogate loss of a two-image batch through the tiny extractor
/// and the head, as a function of every extractor parameter and every
/// prototype. Batch norm couples the two images.
struct StackProbe {
    model: FcnModel,
    images: Vec<Vec<Tensor>>,
    config: NbnlConfig,
    labels: Vec<usize>,
    x: Vec<f64>,
}

fn model_params(model: &FcnModel) -> Vec<f64> {
    let mut out = Vec::new();
    for c in &model.convs {
        out.extend_from_slice(c.weights.data());
        out.extend_from_slice(c.bias.data());
    }
    if let Some(bn) = &model.batch_norm {
        out.extend_from_slice(&bn.gamma);
        out.extend_from_slice(&bn.beta);
    }
    out
}

fn grads_flat(g: &FcnGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for c in &g.convs {
        out.extend_from_slice(c.weights.data());
        out.extend_from_slice(c.bias.data());
    }
    out.extend_from_slice(&g.bn_gamma);
    out.extend_from_slice(&g.bn_beta);
    out
}

fn set_model_params(model: &mut FcnModel, x: &[f64]) -> usize {
    let mut offset = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&x[offset..offset + dst.len()]);
        offset += dst.len();
    };
    for c in &mut model.convs {
        take(c.weights.data_mut());
        take(c.bias.data_mut());
    }
    if let Some(bn) = &mut model.batch_norm {
        take(&mut bn.gamma);
        take(&mut bn.beta);
    }
    offset
}

impl Probe for StackProbe {
    fn params(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Kinks)> {
        let mut model = self.model.clone();
        let used = set_model_params(&mut model, x);
        let dim = model.topology().descriptor_dim();
        let bank = PrototypeBank::new(self.config, dim, x[used..].to_vec())?;
        let (msds, caches) = extract_levels_batch(&model, &self.images, NormMode::Train)?;
        let mut value = 0.0;
        let mut grad_bank = vec![0.0; bank.weights().len()];
        let mut grad_levels = vec![Vec::new(); caches.len()];
        let mut hinge = Vec::new();
        for (msd, &label) in msds.iter().zip(&self.labels) {
            let s = surrogate_loss(msd, &bank, label)?;
            value += s.value;
            grad_bank.iter_mut().zip(&s.grad_prototypes).for_each(|(a, b)| *a += b);
            for (dst, g) in grad_levels.iter_mut().zip(s.grad_descriptors) {
                dst.push(g);
            }
            hinge.extend(hinge_pattern(msd.flatten().as_slice(), bank.weights(), dim));
        }
        let mut total = FcnGrads::zeros_like(&model);
        for (cache, g) in caches.iter().zip(&grad_levels) {
            total.add_scaled(&fcn_backward_batch(&model, cache, g)?, 1.0);
        }
        let mut grad = grads_flat(&total);
        grad.extend(grad_bank);
        let kinks = Kinks {
            relu: caches.iter().flat_map(|c| c.activation_pattern()).collect(),
            hinge,
        };
        Ok((value, grad, kinks))
    }
}

fn stack_probe(rng: &mut ChaCha8Rng) -> Result<StackProbe> {
    let topology = tiny_topology();
    let dim = topology.descriptor_dim();
    let mut model = FcnModel::init(topology, rng)?;
    if let Some(bn) = &mut model.batch_norm {
        bn.gamma = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
        bn.beta = (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect();
    }
    let mut images = Vec::new();
    for _ in 0..2 {
        let levels = [11, 13]
            .iter()
            .map(|&n| Tensor::new(vec![3, n, n], (0..3 * n * n).map(|_| rng.random::<f64>()).collect()))
            .collect::<Result<Vec<_>>>()?;
        images.push(levels);
    }
    let config = NbnlConfig::new(random_q(rng), 2, 3)?;
    let mut x = model_params(&model);
    x.extend(
        gaussian(rng, config.classes * config.prototypes_per_class * dim)
            .iter()
            .map(|v| v * 0.4),
    );
    Ok(StackProbe {
        model,
        images,
        config,
        labels: vec![rng.random_range(0..config.classes), rng.random_range(0..config.classes)],
        x,
    })
}

fn draw_probe(component: GradComponent, rng: &mut ChaCha8Rng) -> Result<Box<dyn Probe>> {
    Ok(match component {
        GradComponent::Omega => Box::new(omega_probe(rng)),
        GradComponent::SurrogateLoss => Box::new(surrogate_probe(rng)?),
        GradComponent::Linear => {
            let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
            let k = rng.random_range(1..4);
            let s = rng.random_range(1..3);
            Box::new(conv_probe(rng, ci, co, k, s, false))
        }
        GradComponent::Layer(i) => {
            let topo = tiny_topology();
            let spec = topo.conv_specs()[i];
            let layer = topo.layers[i];
            Box::new(conv_probe(
                rng,
                spec.in_channels,
                spec.out_channels,
                spec.kernel_size,
                spec.stride,
                layer.relu,
            ))
        }
        GradComponent::FullStack => Box::new(stack_probe(rng)?),
    })
}

/// Runs `trials` accepted comparisons for `component` and reports the
/// largest relative error. Deterministic in `seed`.
pub fn grad_check(component: GradComponent, trials: usize, seed: u64) -> Result<GradCheckReport> {
    if let GradComponent::Layer(i) = component {
        let layers = tiny_topology().layers.len();
        if i >= layers {
            return Err(Error::invalid(format!("layer {i} out of range for {layers} layers")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    let mut done = 0;
    while done < trials {
        let probe = draw_probe(component, &mut rng)?;
        match directional_check(probe.as_ref(), &mut rng)? {
            Some(err) => {
                worst = worst.max(err);
                done += 1;
            }
            None => {
                redraws += 1;
                if redraws > MAX_REDRAWS {
                    return Err(Error::invalid(format!(
                        "{component}: no differentiable instance found in {MAX_REDRAWS} draws"
                    )));
                }
            }
        }
    }
    Ok(GradCheckReport {
        component,
        max_relative_error: worst,
        trials,
        redraws,
    })
}
