//! On-demand JPEG thumbnails with a bounded in-memory cache.

use std::io::Cursor;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::Mutex;

use axum::body::Bytes;
use image::codecs::jpeg::JpegEncoder;
use lru::LruCache;

/// Longest side of a thumbnail, in pixels.
pub const THUMB_SIZE: u32 = 128;
pub const CACHE_CAPACITY: usize = 1000;
const JPEG_QUALITY: u8 = 85;

/// Decodes `path` and downscales it to fit a `THUMB_SIZE` square.
pub fn render_thumbnail(path: &Path) -> image::ImageResult<Vec<u8>> {
    let img = image::open(path)?.thumbnail(THUMB_SIZE, THUMB_SIZE).into_rgb8();
    let mut out = Cursor::new(Vec::new());
    img.write_with_encoder(JpegEncoder::new_with_quality(&mut out, JPEG_QUALITY))?;
    Ok(out.into_inner())
}

pub struct ThumbCache {
    inner: Mutex<LruCache<String, Bytes>>,
}

impl ThumbCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        ThumbCache {
            inner: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn get(&self, key: &str) -> Option<Bytes> {
        self.inner.lock().expect("thumb cache poisoned").get(key).cloned()
    }

    pub fn put(&self, key: String, value: Bytes) {
        self.inner.lock().expect("thumb cache poisoned").put(key, value);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("thumb cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for ThumbCache {
    fn default() -> Self {
        ThumbCache::new(CACHE_CAPACITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thumbnail_fits_box_and_keeps_aspect() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("wide.png");
        image::RgbImage::from_pixel(512, 256, image::Rgb([200, 10, 10]))
            .save(&path)
            .unwrap();
        let jpeg = render_thumbnail(&path).unwrap();
        let thumb = image::load_from_memory(&jpeg).unwrap();
        assert_eq!((thumb.width(), thumb.height()), (128, 64));
    }

    #[test]
    fn cache_evicts_oldest() {
        let c = ThumbCache::new(2);
        for k in ["a", "b", "c"] {
            c.put(k.into(), Bytes::from_static(b"x"));
        }
        assert_eq!(c.len(), 2);
        assert!(c.get("a").is_none());
        assert!(c.get("c").is_some());
    }
}
