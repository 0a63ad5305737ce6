//! Parameter-free feature cropping between encoder and decoder.

use crate::datamodel::BBox;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use tch::Tensor;

/// Cropping behaviour of a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Base model: the decoder sees the whole feature.
    Identity,
    /// Class model: the decoder sees the instance region, which is the
    /// central half of a 2x-enlarged context.
    CentralHalf,
}

pub fn crop_identity(phi_prime: &Tensor) -> Tensor {
    phi_prime.shallow_clone()
}

/// Feature-grid box covering a pixel box: floor the start, ceil the end.
pub fn box_to_feature_coords(pixel_box: &BBox, stride: i64) -> Result<BBox> {
    if stride < 1 {
        return Err(Error::InvalidArgument(format!("stride {stride} must be positive")));
    }
    Ok(BBox {
        x0: pixel_box.x0.div_euclid(stride),
        y0: pixel_box.y0.div_euclid(stride),
        x1: -(-pixel_box.x1).div_euclid(stride),
        y1: -(-pixel_box.y1).div_euclid(stride),
    })
}

/// Crop a `[B, C, H, W]` feature to `bbox` (feature coordinates, in bounds).
pub fn crop_feature(phi_prime: &Tensor, bbox: &BBox) -> Result<Tensor> {
    let s = phi_prime.size();
    if s.len() != 4 || bbox.x0 < 0 || bbox.y0 < 0 || bbox.y1 > s[2] || bbox.x1 > s[3] || bbox.x1 <= bbox.x0 || bbox.y1 <= bbox.y0 {
        return Err(Error::Shape(format!("feature box {bbox:?} outside feature {s:?}")));
    }
    Ok(phi_prime.narrow(2, bbox.y0, bbox.height()).narrow(3, bbox.x0, bbox.width()))
}

/// Rows and columns `[Q/4, 3Q/4)` of a `Q x Q'` feature.
pub fn crop_instance_region(phi_prime: &Tensor) -> Result<Tensor> {
    let s = phi_prime.size();
    if s.len() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(Error::Shape(format!("feature dims must be divisible by 4, got {s:?}")));
    }
    let bbox = BBox { x0: s[3] / 4, y0: s[2] / 4, x1: 3 * s[3] / 4, y1: 3 * s[2] / 4 };
    crop_feature(phi_prime, &bbox)
}

pub fn apply(mode: CropMode, phi_prime: &Tensor) -> Result<Tensor> {
    match mode {
        CropMode::Identity => Ok(crop_identity(phi_prime)),
        CropMode::CentralHalf => crop_instance_region(phi_prime),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn feature_coords_cover_pixel_box() {
        let b = |x0, y0, x1, y1| BBox { x0, y0, x1, y1 };
        assert_eq!(box_to_feature_coords(&b(32, 32, 96, 96), 16).unwrap(), b(2, 2, 6, 6));
        assert_eq!(box_to_feature_coords(&b(30, 30, 97, 97), 16).unwrap(), b(1, 1, 7, 7));
        assert_eq!(box_to_feature_coords(&b(0, 0, 256, 128), 16).unwrap(), b(0, 0, 16, 8));
    }

    #[test]
    fn central_half_is_exact_sub_tensor() {
        let phi = Tensor::arange(2 * 16 * 16, (Kind::Float, Device::Cpu)).reshape([1, 2, 16, 16]);
        let c = crop_instance_region(&phi).unwrap();
        assert_eq!(c.size(), vec![1, 2, 8, 8]);
        let expect = phi.narrow(2, 4, 8).narrow(3, 4, 8);
        assert!(crate::tensor::bit_equal(&c.contiguous(), &expect.contiguous()));
        let small = Tensor::ones([1, 1, 8, 8], (Kind::Float, Device::Cpu));
        assert_eq!(crop_instance_region(&small).unwrap().size(), vec![1, 1, 4, 4]);
        assert!(crop_instance_region(&Tensor::ones([1, 1, 6, 6], (Kind::Float, Device::Cpu))).is_err());
    }
}
