use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.dims() != input.dims() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", grad_out.dims(), input.dims()),
        ));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}

/// Elementwise `x^e`. A negative base with a fractional exponent is rejected.
pub fn pow_elem(input: &Tensor, exponent: f64) -> Result<Tensor> {
    if exponent.fract() != 0.0 {
        if let Some(pos) = input.data().iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "negative base {} at index {pos} with fractional exponent {exponent}",
                input.data()[pos]
            )));
        }
    }
    Ok(input.map(|v| v.powf(exponent)))
}

/// Nearest-neighbour upsampling of a `C x H x W` tensor by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::invalid("upsampling factor must be >= 1"));
    }
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = &input.data()[(ch * h + y / factor) * w..][..w];
            out.extend((0..ow).map(|x| row[x / factor]));
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// `log(sum(exp(u)))` computed with a max shift.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or_else(|| Error::invalid("logsumexp of an empty slice"))?;
    if !max.is_finite() {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(values)?;
    Ok(values.iter().map(|&v| (v - lse).exp()).collect())
}
