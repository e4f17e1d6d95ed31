use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{ImageFormat, ImageReader};
use thiserror::Error;

use crate::model::ImageRef;
use crate::store::ImageRoot;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("image {uri} is unreadable: {reason}")]
    Unreadable { uri: String, reason: String },
    #[error("image {0} is empty")]
    Empty(String),
    #[error("unsupported media type {media_type} for {uri}")]
    UnsupportedMediaType { uri: String, media_type: String },
}

/// Wire form of an image part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodedImage {
    Inline { media_type: String, base64: String },
    Locator(String),
}

impl EncodedImage {
    /// Value for an `image_url` content part.
    pub fn url(&self) -> String {
        match self {
            EncodedImage::Inline { media_type, base64 } => format!("data:{media_type};base64,{base64}"),
            EncodedImage::Locator(u) => u.clone(),
        }
    }

    pub fn decode(&self) -> Option<Vec<u8>> {
        match self {
            EncodedImage::Inline { base64, .. } => STANDARD.decode(base64).ok(),
            EncodedImage::Locator(_) => None,
        }
    }
}

const SUPPORTED: [&str; 3] = ["image/png", "image/jpeg", "image/jpg"];

/// Reads an image for the wire. Remote locators pass through. With
/// `max_dim`, larger images are downscaled (aspect kept) and re-encoded as PNG.
pub fn encode_image(root: &ImageRoot, image: &ImageRef, max_dim: Option<u32>) -> Result<EncodedImage, ImageError> {
    if ImageRoot::is_remote(&image.uri) {
        return Ok(EncodedImage::Locator(image.uri.clone()));
    }
    if !SUPPORTED.contains(&image.media_type.as_str()) {
        return Err(ImageError::UnsupportedMediaType { uri: image.uri.clone(), media_type: image.media_type.clone() });
    }
    let unreadable = |reason: String| ImageError::Unreadable { uri: image.uri.clone(), reason };
    let path = root.local_path(image).ok_or_else(|| unreadable("no local path".into()))?;
    let bytes = std::fs::read(&path).map_err(|e| unreadable(e.to_string()))?;
    if bytes.is_empty() {
        return Err(ImageError::Empty(image.uri.clone()));
    }
    if let Some(limit) = max_dim {
        let img = ImageReader::new(Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| unreadable(e.to_string()))?
            .decode()
            .map_err(|e| unreadable(e.to_string()))?;
        if img.width().max(img.height()) > limit {
            let small = img.resize(limit, limit, image::imageops::FilterType::Triangle);
            let mut out = Vec::new();
            small.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).map_err(|e| unreadable(e.to_string()))?;
            return Ok(EncodedImage::Inline { media_type: "image/png".into(), base64: STANDARD.encode(out) });
        }
    }
    Ok(EncodedImage::Inline { media_type: image.media_type.clone(), base64: STANDARD.encode(&bytes) })
}
