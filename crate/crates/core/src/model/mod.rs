//! Network definitions.

pub mod cropper;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod extractor;
pub mod generator;
pub mod layers;
