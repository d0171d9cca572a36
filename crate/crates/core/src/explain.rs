//! Grad-CAM heatmaps for the classifier.

use image::RgbImage;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::kernels::bilinear_resample;
use crate::nn::{ClassifierModel, Mode, Model, ParamGrads, NUM_CLASSES};
use crate::tensor::{Element, Tensor};

/// Default target: output of the last convolution in the dense block.
pub const DEFAULT_TARGET_LAYER: &str = "dense_block";
/// Blend weight of the colour ramp at heat 1.
pub const OVERLAY_ALPHA: f32 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Max-normalized values in `[0, 1]`, row-major at input resolution.
    pub values: Vec<f32>,
    pub target_class: usize,
    pub target_layer: String,
    /// Set when the map is identically zero (no positive evidence).
    pub all_zero: bool,
    /// Unnormalized map at the target layer's resolution, after the ReLU.
    pub raw: Vec<f64>,
    pub raw_width: usize,
    pub raw_height: usize,
}

impl Heatmap {
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::new(self.width, self.height, self.values.clone()).expect("heatmap size")
    }

    /// Mean heat over pixels where `select` is true.
    pub fn mean_where(&self, select: impl Fn(usize) -> bool) -> Option<f64> {
        let (mut s, mut n) = (0.0, 0usize);
        for (i, &v) in self.values.iter().enumerate() {
            if select(i) {
                s += v as f64;
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    }
}

/// Grad-CAM of `class_idx` at `target_layer` for a single `[1, C, H, W]` input.
///
/// Channel weights are spatial means of `d logit / d A`; the map is
/// `ReLU(sum_k alpha_k A_k)`, bilinearly resized to `H x W` and divided by its maximum.
pub fn grad_cam<T: Element>(
    model: &ClassifierModel<T>,
    input: &Tensor<T>,
    class_idx: usize,
    target_layer: &str,
) -> Result<Heatmap> {
    if class_idx >= NUM_CLASSES {
        return Err(Error::Config(format!(
            "class index {class_idx} outside 0..{}",
            NUM_CLASSES - 1
        )));
    }
    let (n, _, height, width) = input.dims4()?;
    if n != 1 {
        return Err(Error::dim(format!("grad_cam takes one image, got a batch of {n}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().with_requires_grad(true));
    let fwd = model.forward(&mut tape, x, Mode::Eval, ParamGrads::None)?;
    let act = fwd
        .tap(target_layer)
        .ok_or_else(|| Error::UnknownLayer(target_layer.to_string()))?;
    let (_, k, h, w) = tape.value(act).dims4()?;
    let logit = tape.select(fwd.output, class_idx)?;
    tape.backward(logit)?;
    let a = tape.value(act).data();
    let plane = h * w;
    let zeros = vec![T::zero(); a.len()];
    let g = tape.grad(act).unwrap_or(&zeros);

    let mut raw = vec![0.0f64; plane];
    for ch in 0..k {
        let gs = &g[ch * plane..(ch + 1) * plane];
        let alpha = gs.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        for (r, av) in raw.iter_mut().zip(&a[ch * plane..(ch + 1) * plane]) {
            *r += alpha * av.as_f64();
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    let small: Vec<f32> = raw.iter().map(|&v| v as f32).collect();
    let mut values = bilinear_resample(&small, w, h, width, height);
    let max = values.iter().copied().fold(0.0f32, f32::max);
    let all_zero = !(max > 0.0);
    if all_zero {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(Heatmap {
        width,
        height,
        values,
        target_class: class_idx,
        target_layer: target_layer.to_string(),
        all_zero,
        raw,
        raw_width: w,
        raw_height: h,
    })
}

/// Jet-style ramp: blue at 0, green at 0.5, red at 1.
pub fn jet(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let f = |c: f32| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// Blends `jet(h)` over the grayscale image with weight `0.4 h` per pixel.
pub fn overlay_heatmap(img: &GrayImage, hm: &Heatmap) -> Result<RgbImage> {
    if (img.width(), img.height()) != (hm.width, hm.height) {
        return Err(Error::dim(format!(
            "heatmap {}x{} does not match image {}x{}",
            hm.width,
            hm.height,
            img.width(),
            img.height()
        )));
    }
    let mut out = img.to_rgb();
    for (px, (&g, &h)) in out.pixels_mut().zip(img.pixels().iter().zip(&hm.values)) {
        if h <= 0.0 {
            continue;
        }
        let a = OVERLAY_ALPHA * h;
        let c = jet(h);
        for ch in 0..3 {
            px.0[ch] = (((1.0 - a) * g + a * c[ch]) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::imaging::encode_rgb_png;
    use crate::nn::{Block, WidthConfig};

    fn trained_like(seed: u64) -> ClassifierModel<f64> {
        let mut m = ClassifierModel::<f64>::new(&WidthConfig::desk(2), seed).unwrap();
        m.mark_stats_initialized();
        m
    }

    fn input(seed: u64, side: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 1, side, side], |_| rng.random_range(-1.0..1.0))
    }

    fn head_mut(m: &mut ClassifierModel<f64>) -> &mut Block<f64> {
        m.blocks_mut().last_mut().unwrap()
    }

    #[test]
    fn zero_head_gives_flagged_zero_map() {
        let mut m = trained_like(1);
        for p in &mut head_mut(&mut m).params {
            p.value.data_mut().fill(0.0);
        }
        let hm = grad_cam(&m, &input(2, 32), 1, DEFAULT_TARGET_LAYER).unwrap();
        assert!(hm.all_zero);
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_of_one_channel_gives_relu_of_that_channel() {
        // logit 0 = mean over the concatenated features' channel F-g (first channel of the last
        // dense layer's output) through GAP and a one-hot FC column.
        let mut m = trained_like(3);
        let width = *m.width();
        let f = width.dense_output_channels();
        let target_ch = f - width.growth;
        let head = head_mut(&mut m);
        head.params[0].value.data_mut().fill(0.0);
        head.params[1].value.data_mut().fill(0.0);
        head.params[0].value.data_mut()[target_ch * NUM_CLASSES] = 1.0;

        let x = input(4, 32);
        let hm = grad_cam(&m, &x, 0, DEFAULT_TARGET_LAYER).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = m.forward(&mut tape, xv, Mode::Eval, ParamGrads::None).unwrap();
        let a = tape.value(fwd.tap(DEFAULT_TARGET_LAYER).unwrap());
        let (_, _, h, w) = a.dims4().unwrap();
        let plane = h * w;
        // alpha_0 = 1 / (h w), others 0
        let expect: Vec<f64> = a.data()[..plane].iter().map(|&v| (v / plane as f64).max(0.0)).collect();
        for (r, e) in hm.raw.iter().zip(&expect) {
            assert!((r - e).abs() < 1e-12, "{r} vs {e}");
        }
    }

    #[test]
    fn contract_on_random_models() {
        for seed in 0..6 {
            let m = trained_like(seed);
            for class in 0..3 {
                let hm = grad_cam(&m, &input(seed + 10, 32), class, DEFAULT_TARGET_LAYER).unwrap();
                assert_eq!((hm.width, hm.height), (32, 32));
                assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(hm.raw.iter().all(|&v| v >= 0.0));
                if !hm.all_zero {
                    let max = hm.values.iter().copied().fold(0.0f32, f32::max);
                    assert!((max - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bad_arguments() {
        let m = trained_like(0);
        assert!(matches!(
            grad_cam(&m, &input(0, 32), 0, "enc9"),
            Err(Error::UnknownLayer(_))
        ));
        assert!(grad_cam(&m, &input(0, 32), 3, DEFAULT_TARGET_LAYER).is_err());
        for layer in ["enc1", "enc4", "dense_block.layer0", "dense_block.concat"] {
            grad_cam(&m, &input(0, 32), 2, layer).unwrap();
        }
    }

    #[test]
    fn does_not_mutate_model() {
        let m = trained_like(5);
        let before = m.clone();
        grad_cam(&m, &input(1, 32), 2, DEFAULT_TARGET_LAYER).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn invariant_to_positive_head_rescaling() {
        let mut m = trained_like(6);
        let x = input(7, 32);
        let a = grad_cam(&m, &x, 1, DEFAULT_TARGET_LAYER).unwrap();
        for v in head_mut(&mut m).params[0].value.data_mut() {
            *v *= 3.5;
        }
        let b = grad_cam(&m, &x, 1, DEFAULT_TARGET_LAYER).unwrap();
        for (p, q) in a.values.iter().zip(&b.values) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn overlay_rules() {
        let img = GrayImage::new(4, 4, (0..16).map(|i| i as f32 / 15.0).collect()).unwrap();
        let mut hm = Heatmap {
            width: 4,
            height: 4,
            values: vec![0.0; 16],
            target_class: 0,
            target_layer: "x".into(),
            all_zero: true,
            raw: vec![],
            raw_width: 0,
            raw_height: 0,
        };
        assert_eq!(overlay_heatmap(&img, &hm).unwrap(), img.to_rgb());
        hm.values = vec![1.0; 16];
        let a = encode_rgb_png(&overlay_heatmap(&img, &hm).unwrap()).unwrap();
        let b = encode_rgb_png(&overlay_heatmap(&img, &hm).unwrap()).unwrap();
        assert_eq!(a, b);
        let px = overlay_heatmap(&img, &hm).unwrap().get_pixel(0, 0).0;
        assert_eq!(px, [(0.4f32 * 0.5 * 255.0).round() as u8, 0, 0]);
        hm.width = 3;
        assert!(overlay_heatmap(&img, &hm).is_err());
    }
}
