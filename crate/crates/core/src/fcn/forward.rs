use super::model::{FcnGrads, FcnModel};
use super::topology::{scale_pyramid, ScalePyramidConfig};
use crate::data::Image;
use crate::descriptors::{DescriptorGrid, DescriptorSet, MultiScaleDescriptors};
use crate::error::{Error, Result};
use crate::numerics::{
    batch_norm_backward, batch_norm_forward, conv2d, conv2d_backward, relu, relu_backward, BatchNormCache, NormMode,
    Tensor,
};

/// Descriptors with a smaller norm are mapped to the zero vector.
pub const NORMALIZE_MIN_NORM: f64 = 1e-12;

#[derive(Clone, Debug)]
struct ConvCache {
    layer_inputs: Vec<Tensor>,
    pre_activations: Vec<Option<Tensor>>,
    rows: usize,
    cols: usize,
}

/// Activations retained by [`fcn_forward_batch`] for [`fcn_backward_batch`].
///
/// The convolutions run per input; batch norm and normalization act on the
/// descriptors of all inputs stacked together.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    convs: Vec<ConvCache>,
    batch_norm: Option<BatchNormCache>,
    /// Norms of the descriptors entering the L2 normalization.
    norms: Option<Vec<f64>>,
    outputs: Vec<f64>,
}

impl ForwardCache {
    pub fn batch_norm(&self) -> Option<&BatchNormCache> {
        self.batch_norm.as_ref()
    }

    /// Number of inputs the cache was built from.
    pub fn inputs(&self) -> usize {
        self.convs.len()
    }

    /// Sign pattern of every ReLU input; changes only when a perturbation
    /// crosses a kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.convs
            .iter()
            .flat_map(|c| c.pre_activations.iter().flatten())
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

fn transpose_to_rows(map: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (d, rows, cols) = map.chw()?;
    let n = rows * cols;
    let mut out = vec![0.0; n * d];
    for (ch, plane) in map.data().chunks(n).enumerate() {
        for (i, &v) in plane.iter().enumerate() {
            out[i * d + ch] = v;
        }
    }
    Ok((rows, cols, out))
}

fn transpose_to_map(rows_major: &[f64], d: usize, rows: usize, cols: usize) -> Result<Tensor> {
    let n = rows * cols;
    let mut out = vec![0.0; n * d];
    for (i, z) in rows_major.chunks(d).enumerate() {
        for (ch, &v) in z.iter().enumerate() {
            out[ch * n + i] = v;
        }
    }
    Tensor::new(vec![d, rows, cols], out)
}

fn conv_stack(model: &FcnModel, input: &Tensor) -> Result<(Vec<f64>, ConvCache)> {
    let topo = model.topology();
    let (c, h, w) = input.chw()?;
    if c != topo.in_channels {
        return Err(Error::shape(
            "fcn_forward",
            format!("input has {c} channels, topology expects {}", topo.in_channels),
        ));
    }
    topo.grid_shape(h, w)?;
    let mut layer_inputs = Vec::with_capacity(topo.layers.len());
    let mut pre_activations = Vec::with_capacity(topo.layers.len());
    let mut x = input.clone();
    for (layer, params) in topo.layers.iter().zip(&model.convs) {
        let y = conv2d(&x, &params.weights, Some(&params.bias), layer.stride)?;
        layer_inputs.push(x);
        if layer.relu {
            x = relu(&y);
            pre_activations.push(Some(y));
        } else {
            x = y;
            pre_activations.push(None);
        }
    }
    let (rows, cols, desc) = transpose_to_rows(&x)?;
    Ok((
        desc,
        ConvCache {
            layer_inputs,
            pre_activations,
            rows,
            cols,
        },
    ))
}

/// Runs the extractor on a `C x H x W` input and returns its descriptor
/// grid. In train mode the batch-norm statistics are those of this grid.
pub fn fcn_forward(model: &FcnModel, input: &Tensor, mode: NormMode) -> Result<(DescriptorGrid, ForwardCache)> {
    let (mut grids, cache) = fcn_forward_batch(model, std::slice::from_ref(input), mode)?;
    Ok((grids.pop().expect("one grid per input"), cache))
}

/// Runs the extractor on several inputs (any sizes). In train mode batch
/// norm uses the statistics of all their grid cells together.
pub fn fcn_forward_batch(
    model: &FcnModel,
    inputs: &[Tensor],
    mode: NormMode,
) -> Result<(Vec<DescriptorGrid>, ForwardCache)> {
    if inputs.is_empty() {
        return Err(Error::invalid("fcn_forward_batch needs at least one input"));
    }
    let dim = model.topology().descriptor_dim();
    let mut convs = Vec::with_capacity(inputs.len());
    let mut desc = Vec::new();
    for input in inputs {
        let (d, cache) = conv_stack(model, input)?;
        desc.extend(d);
        convs.push(cache);
    }

    let mut bn_cache = None;
    if let Some(state) = &model.batch_norm {
        let (out, cache) = batch_norm_forward(&desc, state, mode)?;
        desc = out;
        bn_cache = Some(cache);
    }

    let mut norms = None;
    if model.topology().normalize_descriptors {
        let n: Vec<f64> = desc
            .chunks(dim)
            .map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        for (z, &len) in desc.chunks_mut(dim).zip(&n) {
            if len < NORMALIZE_MIN_NORM {
                z.fill(0.0);
            } else {
                z.iter_mut().for_each(|v| *v /= len);
            }
        }
        norms = Some(n);
    }

    let mut grids = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for c in &convs {
        let n = c.rows * c.cols * dim;
        let set = DescriptorSet::new(dim, desc[offset..offset + n].to_vec())?;
        grids.push(DescriptorGrid::new(c.rows, c.cols, set)?);
        offset += n;
    }
    Ok((
        grids,
        ForwardCache {
            convs,
            batch_norm: bn_cache,
            norms,
            outputs: desc,
        },
    ))
}

/// Backpropagates descriptor gradients (`eta x D`, grid order) to the
/// parameters selected by the model's trainable mask.
pub fn fcn_backward(model: &FcnModel, cache: &ForwardCache, grad_descriptors: &DescriptorSet) -> Result<FcnGrads> {
    fcn_backward_batch(model, cache, std::slice::from_ref(grad_descriptors))
}

/// Backward pass of [`fcn_forward_batch`]; one gradient set per input, in
/// order. Parameter gradients are summed over the inputs.
pub fn fcn_backward_batch(
    model: &FcnModel,
    cache: &ForwardCache,
    grad_descriptors: &[DescriptorSet],
) -> Result<FcnGrads> {
    let topo = model.topology();
    let dim = topo.descriptor_dim();
    if grad_descriptors.len() != cache.convs.len() {
        return Err(Error::shape(
            "fcn_backward",
            format!(
                "{} gradient sets for {} cached inputs",
                grad_descriptors.len(),
                cache.convs.len()
            ),
        ));
    }
    let mut g = Vec::with_capacity(cache.outputs.len());
    for (gd, c) in grad_descriptors.iter().zip(&cache.convs) {
        if c.layer_inputs.len() != topo.layers.len() {
            return Err(Error::shape(
                "fcn_backward",
                format!(
                    "cache holds {} layers, model has {}",
                    c.layer_inputs.len(),
                    topo.layers.len()
                ),
            ));
        }
        if gd.dim() != dim || gd.len() != c.rows * c.cols {
            return Err(Error::shape(
                "fcn_backward",
                format!(
                    "{} x {} upstream gradient for a {}x{} grid of dimension {dim}",
                    gd.len(),
                    gd.dim(),
                    c.rows,
                    c.cols
                ),
            ));
        }
        g.extend_from_slice(gd.as_slice());
    }
    let mut grads = FcnGrads::zeros_like(model);

    if let Some(norms) = &cache.norms {
        // d(x/|x|) = (g - y (y.g)) / |x|
        for ((gz, y), &n) in g.chunks_mut(dim).zip(cache.outputs.chunks(dim)).zip(norms) {
            if n < NORMALIZE_MIN_NORM {
                gz.fill(0.0);
                continue;
            }
            let proj: f64 = gz.iter().zip(y).map(|(a, b)| a * b).sum();
            for (a, b) in gz.iter_mut().zip(y) {
                *a = (*a - b * proj) / n;
            }
        }
    }

    if let (Some(state), Some(bn_cache)) = (&model.batch_norm, &cache.batch_norm) {
        let bn = batch_norm_backward(&g, bn_cache, state)?;
        if model.batch_norm_trainable() {
            grads.bn_gamma = bn.gamma;
            grads.bn_beta = bn.beta;
        }
        g = bn.input;
    }

    let Some(first_trainable) = model.trainable().iter().position(|&t| t) else {
        return Ok(grads);
    };
    let mut offset = 0;
    for c in &cache.convs {
        let n = c.rows * c.cols * dim;
        let mut grad_map = transpose_to_map(&g[offset..offset + n], dim, c.rows, c.cols)?;
        offset += n;
        for l in (first_trainable..topo.layers.len()).rev() {
            if let Some(pre) = &c.pre_activations[l] {
                grad_map = relu_backward(&grad_map, pre)?;
            }
            let need_input = l > first_trainable;
            let cg = conv2d_backward(
                &grad_map,
                &c.layer_inputs[l],
                &model.convs[l].weights,
                topo.layers[l].stride,
                need_input,
            )?;
            if model.trainable()[l] {
                let dst = &mut grads.convs[l];
                dst.weights
                    .data_mut()
                    .iter_mut()
                    .zip(cg.weights.data())
                    .for_each(|(a, b)| *a += b);
                dst.bias
                    .data_mut()
                    .iter_mut()
                    .zip(cg.bias.data())
                    .for_each(|(a, b)| *a += b);
            }
            grad_map = cg.input;
        }
    }
    Ok(grads)
}

/// Forward pass over every pyramid level of `image`.
pub fn extract_multiscale(
    model: &FcnModel,
    image: &Image,
    pyramid: &ScalePyramidConfig,
    mode: NormMode,
) -> Result<(MultiScaleDescriptors, Vec<ForwardCache>)> {
    let levels = scale_pyramid(image, pyramid, model.topology())?;
    extract_levels(model, &levels.iter().map(Image::to_tensor).collect::<Vec<_>>(), mode)
}

/// Forward pass over pre-scaled pyramid levels.
pub fn extract_levels(
    model: &FcnModel,
    levels: &[Tensor],
    mode: NormMode,
) -> Result<(MultiScaleDescriptors, Vec<ForwardCache>)> {
    let mut grids = Vec::with_capacity(levels.len());
    let mut caches = Vec::with_capacity(levels.len());
    for level in levels {
        let (grid, cache) = fcn_forward(model, level, mode)?;
        grids.push(grid);
        caches.push(cache);
    }
    Ok((MultiScaleDescriptors::new(grids)?, caches))
}

/// Forward pass of several images' pyramids, batching each level across
/// images. Returns per-image descriptors and one cache per level.
pub fn extract_levels_batch(
    model: &FcnModel,
    images: &[Vec<Tensor>],
    mode: NormMode,
) -> Result<(Vec<MultiScaleDescriptors>, Vec<ForwardCache>)> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("extract_levels_batch needs at least one image"));
    };
    let scales = first.len();
    if images.iter().any(|l| l.len() != scales) {
        return Err(Error::shape(
            "extract_levels_batch",
            "images have different numbers of levels",
        ));
    }
    let mut per_image: Vec<Vec<DescriptorGrid>> = vec![Vec::with_capacity(scales); images.len()];
    let mut caches = Vec::with_capacity(scales);
    for s in 0..scales {
        let inputs: Vec<Tensor> = images.iter().map(|l| l[s].clone()).collect();
        let (grids, cache) = fcn_forward_batch(model, &inputs, mode)?;
        for (dst, g) in per_image.iter_mut().zip(grids) {
            dst.push(g);
        }
        caches.push(cache);
    }
    let msds = per_image
        .into_iter()
        .map(MultiScaleDescriptors::new)
        .collect::<Result<Vec<_>>>()?;
    Ok((msds, caches))
}
