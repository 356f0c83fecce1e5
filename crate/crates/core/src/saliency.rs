//! Input-gradient saliency maps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{pnm, BBox};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{argmax_rows, BnMode};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// The scalar that is differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SaliencyTarget {
    /// The unnormalized logit of the target class.
    #[default]
    Logit,
    /// The negative cross-entropy loss of the target class.
    Loss,
}

impl fmt::Display for SaliencyTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SaliencyTarget::Logit => "logit",
            SaliencyTarget::Loss => "loss",
        })
    }
}

impl FromStr for SaliencyTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "logit" => Ok(SaliencyTarget::Logit),
            "loss" => Ok(SaliencyTarget::Loss),
            other => Err(format!("unknown saliency target `{other}` (expected logit or loss)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetClass {
    Predicted,
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, nonnegative.
    pub values: Vec<f64>,
    /// The class whose score was differentiated.
    pub class: usize,
}

impl SaliencyMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Min–max scaling to `0..=255`; a constant map becomes all zeros.
    pub fn to_gray(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return vec![0; self.values.len()];
        }
        self.values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
    }
}

/// Gradient of the target score with respect to the input pixels, reduced
/// over channels by the maximum absolute value. Runs the model in eval mode,
/// so the map is deterministic.
pub fn saliency_map<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    class: TargetClass,
    target: SaliencyTarget,
) -> Result<SaliencyMap> {
    let s = image.shape();
    if s.n() != 1 {
        return Err(Error::invalid("saliency_map", format!("expected a single image, got {s}")));
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.leaf(image.clone().with_grad(true));
    let out = model.forward(&mut tape, &vars, x, BnMode::Eval)?;
    let k = match class {
        TargetClass::Predicted => argmax_rows(tape.value(out.logits))[0],
        TargetClass::Class(k) if k < model.config.num_classes => k,
        TargetClass::Class(k) => {
            return Err(Error::invalid(
                "saliency_map",
                format!("class {k} out of range for {} classes", model.config.num_classes),
            ))
        }
    };
    let score = match target {
        SaliencyTarget::Logit => tape.gather_sum(out.logits, &[k])?,
        SaliencyTarget::Loss => {
            let ce = tape.cross_entropy(out.logits, &[k])?;
            tape.scale(ce, -T::one())?
        }
    };
    let grads = tape.backward(score)?;
    let plane = s.plane();
    let mut values = vec![0.0f64; plane];
    if let Some(g) = grads.get(x) {
        for channel in g.data().chunks(plane) {
            for (v, &gi) in values.iter_mut().zip(channel) {
                *v = v.max(gi.as_f64().abs());
            }
        }
    }
    Ok(SaliencyMap { height: s.h(), width: s.w(), values, class: k })
}

pub fn write_saliency_pgm(map: &SaliencyMap, path: &Path) -> Result<()> {
    std::fs::write(path, pnm::encode_pgm(map.width, map.height, &map.to_gray())).map_err(|e| Error::io(path, e))
}

/// Share of the map's total mass inside `bbox`; 0 for an all-zero map.
pub fn bbox_saliency_fraction(map: &SaliencyMap, bbox: BBox) -> Result<f64> {
    if !bbox.fits(map.width, map.height) {
        return Err(Error::invalid(
            "bbox_saliency_fraction",
            format!("bbox {bbox:?} is empty or exceeds a {}x{} map", map.width, map.height),
        ));
    }
    let total: f64 = map.values.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = (bbox.y0..bbox.y1).flat_map(|y| (bbox.x0..bbox.x1).map(move |x| (x, y))).map(|(x, y)| map.get(x, y)).sum();
    Ok((inside / total).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneSpec, ModelConfig, ModelKind, TapSpec};
    use crate::tensor::Fill;
    use proptest::prelude::*;

    fn model(kind: ModelKind) -> Model<f64> {
        let cfg = ModelConfig {
            kind,
            backbone: BackboneSpec { width_multiplier: 0.0625 },
            taps: TapSpec { reduce_channels: 2, pool_kernel: (8, 8), pool_stride: (8, 8), ..TapSpec::desk_scale() },
            num_classes: 3,
            input_size: (32, 32),
        };
        Model::build(cfg, 11).unwrap()
    }

    fn image(seed: u64) -> Tensor<f64> {
        Tensor::create([1, 3, 32, 32], Fill::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn shape_sign_and_determinism() {
        for kind in [ModelKind::Baseline, ModelKind::Hypercolumn] {
            let m = model(kind);
            for target in [SaliencyTarget::Logit, SaliencyTarget::Loss] {
                let a = saliency_map(&m, &image(1), TargetClass::Predicted, target).unwrap();
                assert_eq!((a.height, a.width, a.values.len()), (32, 32, 1024));
                assert!(a.values.iter().all(|v| v.is_finite() && *v >= 0.0));
                assert!(a.values.iter().any(|&v| v > 0.0));
                assert_eq!(a, saliency_map(&m, &image(1), TargetClass::Predicted, target).unwrap());
            }
        }
    }

    #[test]
    fn predicted_class_matches_logits() {
        let m = model(ModelKind::Hypercolumn);
        let map = saliency_map(&m, &image(2), TargetClass::Predicted, SaliencyTarget::Logit).unwrap();
        assert_eq!(map.class, argmax_rows(&m.logits(&image(2)).unwrap())[0]);
        assert!(saliency_map(&m, &image(2), TargetClass::Class(3), SaliencyTarget::Logit).is_err());
        assert_eq!(saliency_map(&m, &image(2), TargetClass::Class(2), SaliencyTarget::Loss).unwrap().class, 2);
    }

    #[test]
    fn input_blind_model_gives_zero_map() {
        let mut m = model(ModelKind::Hypercolumn);
        m.params.get_mut("stem.conv.weight").unwrap().data_mut().fill(0.0);
        let map = saliency_map(&m, &image(3), TargetClass::Predicted, SaliencyTarget::Logit).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert!(map.to_gray().iter().all(|&v| v == 0));
        let full = BBox { x0: 0, y0: 0, x1: 32, y1: 32 };
        assert_eq!(bbox_saliency_fraction(&map, full).unwrap(), 0.0);
    }

    #[test]
    fn scaling_the_score_scales_the_map() {
        let m = model(ModelKind::Baseline);
        let mut scaled = m.clone();
        for name in ["head.fc.weight", "head.fc.bias"] {
            scaled.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 4.0);
        }
        let a = saliency_map(&m, &image(4), TargetClass::Class(1), SaliencyTarget::Logit).unwrap();
        let b = saliency_map(&scaled, &image(4), TargetClass::Class(1), SaliencyTarget::Logit).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((4.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        assert_eq!(a.to_gray(), b.to_gray());
    }

    #[test]
    fn gray_endpoints_and_pgm() {
        let map = SaliencyMap { height: 2, width: 3, values: vec![1.0, 2.0, 3.0, 1.0, 5.0, 1.0], class: 0 };
        let g = map.to_gray();
        assert_eq!(g[4], 255);
        assert_eq!(g[0], 0);
        assert_eq!(g[1], 64);
        let constant = SaliencyMap { values: vec![0.7; 6], ..map.clone() };
        assert!(constant.to_gray().iter().all(|&v| v == 0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        write_saliency_pgm(&map, &path).unwrap();
        assert_eq!(pnm::read_pgm(&path).unwrap(), (3, 2, g));
    }

    #[test]
    fn bbox_fraction_cases() {
        let uniform = SaliencyMap { height: 4, width: 4, values: vec![0.5; 16], class: 0 };
        let quarter = BBox { x0: 0, y0: 0, x1: 2, y1: 2 };
        assert!((bbox_saliency_fraction(&uniform, quarter).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(bbox_saliency_fraction(&uniform, BBox { x0: 0, y0: 0, x1: 4, y1: 4 }).unwrap(), 1.0);
        assert!(bbox_saliency_fraction(&uniform, BBox { x0: 0, y0: 0, x1: 5, y1: 1 }).is_err());
        assert!(bbox_saliency_fraction(&uniform, BBox { x0: 2, y0: 0, x1: 2, y1: 1 }).is_err());
    }

    proptest! {
        #[test]
        fn bbox_fraction_is_monotone(values in proptest::collection::vec(0.0f64..10.0, 36), x0 in 0usize..5, y0 in 0usize..5, w in 1usize..3, h in 1usize..3, grow in 0usize..3) {
            let map = SaliencyMap { height: 6, width: 6, values, class: 0 };
            let inner = BBox { x0, y0, x1: (x0 + w).min(6), y1: (y0 + h).min(6) };
            let outer = BBox { x0: x0.saturating_sub(grow), y0: y0.saturating_sub(grow), x1: (inner.x1 + grow).min(6), y1: (inner.y1 + grow).min(6) };
            let a = bbox_saliency_fraction(&map, inner).unwrap();
            let b = bbox_saliency_fraction(&map, outer).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b >= a - 1e-12);
        }
    }
}
