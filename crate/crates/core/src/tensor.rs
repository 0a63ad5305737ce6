//! Conversions between rasters and `tch` tensors, and seeded random tensors
//! drawn from a portable generator so training runs replay bit-exactly.

use crate::error::{Error, Result};
use crate::raster::Raster;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{Device, Kind, Tensor};

/// `[C, H, W]` tensor of the raster's values.
pub fn raster_to_tensor(r: &Raster, kind: Kind) -> Tensor {
    Tensor::from_slice(r.as_slice())
        .reshape([r.height() as i64, r.width() as i64, r.channels() as i64])
        .permute([2, 0, 1])
        .contiguous()
        .to_kind(kind)
}

/// `[B, C, H, W]` batch of equally sized rasters.
pub fn stack_rasters(rs: &[Raster], kind: Kind) -> Result<Tensor> {
    let first = rs.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    if rs.iter().any(|r| r.dims() != first.dims() || r.channels() != first.channels()) {
        return Err(Error::Shape("rasters in a batch must share dimensions".into()));
    }
    let items: Vec<Tensor> = rs.iter().map(|r| raster_to_tensor(r, kind)).collect();
    Ok(Tensor::stack(&items, 0))
}

/// Raster from a `[C, H, W]` or `[1, C, H, W]` tensor.
pub fn tensor_to_raster(t: &Tensor) -> Result<Raster> {
    let t = match t.dim() {
        3 => t.shallow_clone(),
        4 if t.size()[0] == 1 => t.squeeze_dim(0),
        _ => return Err(Error::Shape(format!("cannot convert tensor of shape {:?} to a raster", t.size()))),
    };
    let (c, h, w) = t.size3()?;
    let data = to_f32_vec(&t.permute([1, 2, 0]))?;
    Raster::from_vec(h as usize, w as usize, c as usize, data)
}

/// Map the generator's `[-1, 1]` range to `[0, 1]`, clamped.
pub fn image_tensor_to_unit_raster(t: &Tensor) -> Result<Raster> {
    tensor_to_raster(&((t.detach().to_kind(Kind::Float) + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(Vec::<f32>::try_from(t.detach().to_kind(Kind::Float).contiguous().flatten(0, -1))?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(Vec::<f64>::try_from(t.detach().to_kind(Kind::Double).contiguous().flatten(0, -1))?)
}

pub fn scalar(t: &Tensor) -> f64 {
    t.detach().to_kind(Kind::Double).double_value(&[])
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[i64], kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_slice(&v).reshape(shape).to_kind(kind).to_device(Device::Cpu)
}

/// Bit-level equality of two tensors (same shape, kind and bytes).
pub fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    if a.size() != b.size() || a.kind() != b.kind() {
        return false;
    }
    let (a, b) = (a.detach().contiguous(), b.detach().contiguous());
    let n = a.numel() * a.kind().elt_size_in_bytes();
    let mut ba = vec![0u8; n];
    let mut bb = vec![0u8; n];
    a.copy_data_u8(&mut ba, a.numel());
    b.copy_data_u8(&mut bb, b.numel());
    ba == bb
}

static TORCH_SEED_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Run `f` with torch's global generator seeded to `seed`, excluding other
/// threads that seed through here, so weight initialisation is reproducible.
pub fn with_torch_seed<T>(seed: u64, f: impl FnOnce() -> T) -> T {
    let _guard = TORCH_SEED_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    tch::manual_seed(seed as i64);
    f()
}
