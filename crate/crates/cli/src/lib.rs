//! Command implementations and the HTTP service behind the `looklab` binary.

pub mod commands;
pub mod server;

use std::path::PathBuf;

use base64::Engine;
use image::RgbImage;
use looklab_core::pipeline::{FsImageSource, ImageSource};
use looklab_core::vision::decode_image_bytes;
use looklab_core::{LookError, Result};

/// Request image refs: `data:image/...;base64,` URIs or file paths under
/// `root`.
#[derive(Clone, Debug)]
pub struct RequestImages {
    pub files: FsImageSource,
}

impl RequestImages {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RequestImages {
            files: FsImageSource::new(root),
        }
    }
}

impl ImageSource for RequestImages {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        let Some(rest) = image_ref.strip_prefix("data:") else {
            return self.files.load(image_ref);
        };
        let undecodable = |reason: &str| LookError::Decode {
            path: "data URI".into(),
            reason: reason.into(),
        };
        let (meta, payload) = rest.split_once(',').ok_or_else(|| undecodable("missing payload"))?;
        if !meta.ends_with(";base64") {
            return Err(undecodable("only base64 data URIs are supported"));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(payload.trim())
            .map_err(|e| undecodable(&e.to_string()))?;
        decode_image_bytes("data URI", &bytes)
    }
}
