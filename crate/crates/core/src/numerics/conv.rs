use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Geometry of one convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::invalid(format!(
                "kernel size and stride must be >= 1, got k={} s={}",
                self.kernel_size, self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!(
                "channel counts must be >= 1, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    /// Output extent of a valid convolution over `input` pixels, if any.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        conv_output_extent(input, self.kernel_size, self.stride)
    }
}

/// `floor((n - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_extent(n: usize, kernel: usize, stride: usize) -> Option<usize> {
    if n < kernel || stride == 0 {
        None
    } else {
        Some((n - kernel) / stride + 1)
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

fn geometry(input: &Tensor, weights: &Tensor, stride: usize) -> Result<ConvGeometry> {
    let (c, h, w) = input.chw()?;
    let &[co, ci, kh, kw] = weights.dims() else {
        return Err(Error::shape(
            "conv2d",
            format!("weights must be C' x C x k x k, got {:?}", weights.dims()),
        ));
    };
    if ci != c || kh != kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weights {:?} incompatible with input {:?}",
                weights.dims(),
                input.dims()
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let (Some(ho), Some(wo)) = (conv_output_extent(h, kh, stride), conv_output_extent(w, kh, stride)) else {
        return Err(Error::shape(
            "conv2d",
            format!("input {h}x{w} smaller than kernel {kh}x{kh}"),
        ));
    };
    Ok(ConvGeometry {
        c,
        h,
        w,
        co,
        k: kh,
        stride,
        ho,
        wo,
    })
}

/// Unfolds input windows into a `(C*k*k) x (H'*W')` matrix.
fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let npix = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.k * g.k * npix];
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let src = &plane[(oy * g.stride + ky) * g.w + kx..];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        out.copy_from_slice(&src[..g.wo]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = src[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Inverse of [`im2col`]: scatters-adds columns back onto the input grid.
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let npix = g.ho * g.wo;
    let mut out = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let base = (oy * g.stride + ky) * g.w + kx;
                    for ox in 0..g.wo {
                        plane[base + ox * g.stride] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
    out
}

/// Valid (unpadded) 2-D convolution of a `C x H x W` input with
/// `C' x C x k x k` weights.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let g = geometry(input, weights, stride)?;
    if let Some(b) = bias {
        if b.dims() != [g.co] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} filters", b.dims(), g.co),
            ));
        }
    }
    let npix = g.ho * g.wo;
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0; g.co * npix];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(npix).zip(b.data()) {
            row.fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(
        g.co,
        g.c * g.k * g.k,
        npix,
        weights.data(),
        false,
        &cols,
        false,
        beta,
        &mut out,
    );
    Tensor::new(vec![g.co, g.ho, g.wo], out)
}

/// Gradients of a convolution with respect to its three arguments.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d`]. `need_input` skips the input gradient when
/// nothing upstream consumes it.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = geometry(input, weights, stride)?;
    if grad_out.dims() != [g.co, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?}, forward output was {:?}",
                grad_out.dims(),
                [g.co, g.ho, g.wo]
            ),
        ));
    }
    let npix = g.ho * g.wo;
    let ckk = g.c * g.k * g.k;
    let cols = im2col(input.data(), &g);

    let mut grad_w = vec![0.0; g.co * ckk];
    gemm(g.co, npix, ckk, grad_out.data(), false, &cols, true, 0.0, &mut grad_w);

    let grad_b: Vec<f64> = grad_out.data().chunks(npix).map(|r| r.iter().sum()).collect();

    let grad_in = if need_input {
        let mut grad_cols = vec![0.0; ckk * npix];
        gemm(
            ckk,
            g.co,
            npix,
            weights.data(),
            true,
            grad_out.data(),
            false,
            0.0,
            &mut grad_cols,
        );
        col2im(&grad_cols, &g)
    } else {
        vec![0.0; g.c * g.h * g.w]
    };

    Ok(ConvGrads {
        input: Tensor::new(input.dims().to_vec(), grad_in)?,
        weights: Tensor::new(weights.dims().to_vec(), grad_w)?,
        bias: Tensor::new(vec![g.co], grad_b)?,
    })
}

/// Sums consecutive groups of `group` channels: the fixed all-ones grouped
/// 1x1 convolution without bias.
pub fn group_sum_channels(input: &Tensor, group: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if group == 0 || c % group != 0 {
        return Err(Error::shape(
            "group_sum_channels",
            format!("{c} channels not divisible into groups of {group}"),
        ));
    }
    let plane = h * w;
    let groups = c / group;
    let mut out = vec![0.0; groups * plane];
    for (gi, dst) in out.chunks_mut(plane).enumerate() {
        for ch in gi * group..(gi + 1) * group {
            for (d, s) in dst.iter_mut().zip(&input.data()[ch * plane..(ch + 1) * plane]) {
                *d += s;
            }
        }
    }
    Tensor::new(vec![groups, h, w], out)
}
