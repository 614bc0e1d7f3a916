use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A per-pixel class-id map (a single segmentation mask).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassMask {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "mask {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.ids[i * self.width + j]
    }

    /// The mask as a `[1, 1, H, W]` tensor of class ids.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.ids.iter().map(|&c| T::of(c as f64)).collect(),
        )
        .expect("mask dims are nonzero")
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes.max(self.max_id() as usize + 1)];
        for &c in &self.ids {
            h[c as usize] += 1;
        }
        h
    }

    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }
}
