use crate::error::{Error, Result};

/// `height × width × channels` pixels, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Splits an image into non-overlapping square patches.
///
/// Patches are ordered row-major over the patch grid; each patch is flattened
/// in `(row, column, channel)` order. Returns `(num_patches, values)`.
pub fn patchify(image: &Image, patch: usize) -> Result<(usize, Vec<f32>)> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image {}x{} is not divisible into {patch}x{patch} patches",
            image.height, image.width
        )));
    }
    let gh = image.height / patch;
    let gw = image.width / patch;
    let mut out = Vec::with_capacity(image.pixels.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * image.width + px * patch;
                out.extend_from_slice(&image.pixels[row * image.channels..(row + patch) * image.channels]);
            }
        }
    }
    Ok((gh * gw, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let img = Image::new(4, 4, 1, (0..16).map(|x| x as f32).collect()).unwrap();
        let (n, v) = patchify(&img, 2).unwrap();
        assert_eq!(n, 4);
        assert_eq!(v.len(), 16);
        // first patch is the top-left 2x2 block
        assert_eq!(&v[..4], &[0.0, 1.0, 4.0, 5.0]);
        // second patch is the top-right block
        assert_eq!(&v[4..8], &[2.0, 3.0, 6.0, 7.0]);

        let big = Image::new(32, 32, 3, vec![0.5; 32 * 32 * 3]).unwrap();
        let (n, v) = patchify(&big, 8).unwrap();
        assert_eq!((n, v.len() / n), (16, 192));
        assert!(v.chunks(192).all(|p| p == &v[..192]));
    }

    #[test]
    fn indivisible_is_config_error() {
        let img = Image::new(5, 4, 1, vec![0.0; 20]).unwrap();
        assert!(matches!(patchify(&img, 2), Err(Error::Config(_))));
    }
}
