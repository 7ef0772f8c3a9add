use std::fmt;
use std::str::FromStr;

use super::image::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RescaleTarget {
    /// Longest side becomes this many pixels; aspect ratio is kept.
    LongestSide(usize),
    Exact {
        width: usize,
        height: usize,
    },
}

/// Bilinear resampling with half-pixel centres.
pub fn rescale_image(image: &Image, target: RescaleTarget) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    let (ow, oh) = match target {
        RescaleTarget::LongestSide(n) => {
            if n == 0 {
                return Err(Error::invalid("rescale target must be >= 1"));
            }
            if w >= h {
                (n, ((h as f64 * n as f64 / w as f64).round() as usize).max(1))
            } else {
                (((w as f64 * n as f64 / h as f64).round() as usize).max(1), n)
            }
        }
        RescaleTarget::Exact { width, height } => {
            if width == 0 || height == 0 {
                return Err(Error::invalid("rescale target must be >= 1"));
            }
            (width, height)
        }
    };
    if (ow, oh) == (w, h) {
        return Ok(image.clone());
    }
    let c = image.channels();
    let src = image.pixels();
    let sample_axis = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5).clamp(0.0, (in_n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(in_n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xs: Vec<_> = (0..ow).map(|x| sample_axis(x, ow, w)).collect();
    let mut pixels = Vec::with_capacity(ow * oh * c);
    for y in 0..oh {
        let (y0, y1, fy) = sample_axis(y, oh, h);
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |x: usize, y: usize| src[(y * w + x) * c + ch];
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(ow, oh, c, pixels)
}

/// Test-time corruptions used by the robustness sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbationKind {
    Original,
    OutsideBorder,
    OccluderRight,
    OccluderCentral,
    TexturedOccluderCentral,
    CutRightHalf,
    CutTopHalf,
    UpsideDown,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 8] = [
        PerturbationKind::Original,
        PerturbationKind::OutsideBorder,
        PerturbationKind::OccluderRight,
        PerturbationKind::OccluderCentral,
        PerturbationKind::TexturedOccluderCentral,
        PerturbationKind::CutRightHalf,
        PerturbationKind::CutTopHalf,
        PerturbationKind::UpsideDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Original => "original",
            PerturbationKind::OutsideBorder => "outside_border",
            PerturbationKind::OccluderRight => "occluder_right",
            PerturbationKind::OccluderCentral => "occluder_central",
            PerturbationKind::TexturedOccluderCentral => "textured_occluder_central",
            PerturbationKind::CutRightHalf => "cut_right_half",
            PerturbationKind::CutTopHalf => "cut_top_half",
            PerturbationKind::UpsideDown => "upside_down",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown perturbation `{s}`")))
    }
}

fn fill_rect(image: &mut Image, x0: usize, y0: usize, x1: usize, y1: usize, value: impl Fn(usize, usize) -> f64) {
    for y in y0..y1 {
        for x in x0..x1 {
            let v = value(x, y);
            for c in 0..image.channels() {
                image.set(x, y, c, v);
            }
        }
    }
}

/// Side length of the checker cells in the textured occluder.
const CHECKER_CELL: usize = 2;

pub fn apply_perturbation(image: &Image, kind: PerturbationKind) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    match kind {
        PerturbationKind::Original => Ok(image.clone()),
        PerturbationKind::OccluderCentral | PerturbationKind::TexturedOccluderCentral => {
            // half of each side: a quarter of the area
            let (ow, oh) = (w / 2, h / 2);
            let (x0, y0) = ((w - ow) / 2, (h - oh) / 2);
            let mut out = image.clone();
            if kind == PerturbationKind::OccluderCentral {
                fill_rect(&mut out, x0, y0, x0 + ow, y0 + oh, |_, _| 0.0);
            } else {
                fill_rect(&mut out, x0, y0, x0 + ow, y0 + oh, |x, y| {
                    ((x / CHECKER_CELL + y / CHECKER_CELL) % 2) as f64
                });
            }
            Ok(out)
        }
        PerturbationKind::OccluderRight => {
            let mut out = image.clone();
            fill_rect(&mut out, w - w / 4, 0, w, h, |_, _| 0.0);
            Ok(out)
        }
        PerturbationKind::OutsideBorder => {
            let (sw, sh) = ((w / 2).max(1), (h / 2).max(1));
            let small = rescale_image(image, RescaleTarget::Exact { width: sw, height: sh })?;
            let mut out = Image::filled(w, h, image.channels(), 0.0);
            let (x0, y0) = ((w - sw) / 2, (h - sh) / 2);
            for y in 0..sh {
                for x in 0..sw {
                    for c in 0..image.channels() {
                        out.set(x0 + x, y0 + y, c, small.get(x, y, c));
                    }
                }
            }
            Ok(out)
        }
        PerturbationKind::CutRightHalf => image.crop(0, 0, (w / 2).max(1), h),
        PerturbationKind::CutTopHalf => {
            let keep = (h / 2).max(1);
            image.crop(0, h - keep, w, keep)
        }
        PerturbationKind::UpsideDown => {
            let c = image.channels();
            let pixels: Vec<f64> = image.pixels().chunks(c).rev().flatten().copied().collect();
            Image::new(w, h, c, pixels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, 3, 0.0);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img.set(x, y, c, ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
                }
            }
        }
        img
    }

    #[test]
    fn longest_side_keeps_ratio() {
        let img = Image::filled(200, 100, 3, 0.5);
        let out = rescale_image(&img, RescaleTarget::LongestSide(100)).unwrap();
        assert_eq!((out.width(), out.height()), (100, 50));
    }

    #[test]
    fn upscaled_pixel_is_constant() {
        let img = Image::new(1, 1, 3, vec![0.2, 0.4, 0.6]).unwrap();
        let out = rescale_image(&img, RescaleTarget::Exact { width: 4, height: 4 }).unwrap();
        for px in out.pixels().chunks(3) {
            assert_eq!(px, &[0.2, 0.4, 0.6]);
        }
    }

    #[test]
    fn constant_stays_constant_when_downscaled() {
        let img = Image::filled(37, 23, 1, 0.3);
        let out = rescale_image(&img, RescaleTarget::Exact { width: 9, height: 5 }).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn upside_down_is_an_involution() {
        let img = gradient_image(13, 7);
        let once = apply_perturbation(&img, PerturbationKind::UpsideDown).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply_perturbation(&once, PerturbationKind::UpsideDown).unwrap(), img);
        assert_eq!(once.get(0, 0, 1), img.get(12, 6, 1));
    }

    #[test]
    fn central_occluder_covers_middle_quarter() {
        let img = Image::filled(100, 100, 3, 1.0);
        let out = apply_perturbation(&img, PerturbationKind::OccluderCentral).unwrap();
        for y in 0..100 {
            for x in 0..100 {
                let inside = (25..75).contains(&x) && (25..75).contains(&y);
                assert_eq!(out.get(x, y, 0), if inside { 0.0 } else { 1.0 }, "({x},{y})");
            }
        }
    }

    #[test]
    fn textured_occluder_has_checker_inside_same_square() {
        let img = Image::filled(100, 100, 3, 0.5);
        let out = apply_perturbation(&img, PerturbationKind::TexturedOccluderCentral).unwrap();
        assert_eq!(out.get(24, 24, 0), 0.5);
        assert_eq!(out.get(25, 25, 0), 0.0);
        assert_eq!(out.get(27, 25, 0), 1.0);
        assert_eq!(out.get(75, 75, 0), 0.5);
    }

    #[test]
    fn right_occluder_blackens_last_quarter() {
        let img = Image::filled(20, 4, 1, 1.0);
        let out = apply_perturbation(&img, PerturbationKind::OccluderRight).unwrap();
        assert_eq!(out.get(14, 2, 0), 1.0);
        assert_eq!(out.get(15, 2, 0), 0.0);
    }

    #[test]
    fn cuts_change_dimensions() {
        let img = gradient_image(200, 60);
        let right = apply_perturbation(&img, PerturbationKind::CutRightHalf).unwrap();
        assert_eq!((right.width(), right.height()), (100, 60));
        assert_eq!(right.get(99, 10, 2), img.get(99, 10, 2));
        let top = apply_perturbation(&img, PerturbationKind::CutTopHalf).unwrap();
        assert_eq!((top.width(), top.height()), (200, 30));
        assert_eq!(top.get(5, 0, 0), img.get(5, 30, 0));
    }

    #[test]
    fn border_shrinks_content_onto_black_canvas() {
        let img = Image::filled(40, 20, 3, 0.8);
        let out = apply_perturbation(&img, PerturbationKind::OutsideBorder).unwrap();
        assert_eq!((out.width(), out.height()), (40, 20));
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(9, 4, 0), 0.0);
        assert!((out.get(10, 5, 0) - 0.8).abs() < 1e-12);
        assert!((out.get(29, 14, 0) - 0.8).abs() < 1e-12);
        assert_eq!(out.get(30, 15, 0), 0.0);
    }

    #[test]
    fn perturbations_preserve_range_and_parse() {
        let img = gradient_image(17, 11);
        for kind in PerturbationKind::ALL {
            let out = apply_perturbation(&img, kind).unwrap();
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(kind.name().parse::<PerturbationKind>().unwrap(), kind);
        }
        assert!("sideways".parse::<PerturbationKind>().is_err());
    }
}
