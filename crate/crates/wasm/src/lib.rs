//! In-browser workbench: one model, one current image.
//!
//! JavaScript drives three operations: generate a sample, train briefly (or
//! load a checkpoint file), and explain the pixel under a click. Images cross
//! the boundary as row-major RGBA8 bytes ready for `ImageData`.

use wasm_bindgen::prelude::*;

use segcam::checkpoint::Checkpoint;
use segcam::data::{self, DatasetSpec, Sample};
use segcam::explain::seg_grad_cam;
use segcam::model::predict_mask;
use segcam::train::{self, TrainConfig};
use segcam::{render, ExplainRequest, Model, PixelSet, SegmentationNet, UNetConfig};

/// Image side used by the demo; small enough to train in a tab.
pub const DEMO_SIZE: usize = 32;

#[wasm_bindgen]
pub struct Workbench {
    model: Model<f32>,
    sample: Sample,
    seed: u64,
}

fn js(e: segcam::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Workbench {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Workbench, JsError> {
        let seed = u64::from(seed);
        let model = Model::init(UNetConfig::default(), seed).map_err(js)?;
        let sample = Self::make_sample(seed, 0).map_err(js)?;
        Ok(Workbench { model, sample, seed })
    }

    fn make_sample(seed: u64, index: usize) -> segcam::Result<Sample> {
        let spec = DatasetSpec { seed, count: index + 1, size: DEMO_SIZE };
        data::generate_sample(&spec, index)
    }

    pub fn size(&self) -> usize {
        DEMO_SIZE
    }

    #[wasm_bindgen(js_name = tapNames)]
    pub fn tap_names(&self) -> Vec<String> {
        self.model.tap_names()
    }

    #[wasm_bindgen(js_name = classNames)]
    pub fn class_names(&self) -> Vec<String> {
        data::CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    }

    /// Replaces the current image with sample `index` of the demo seed.
    pub fn generate(&mut self, index: usize) -> Result<(), JsError> {
        self.sample = Self::make_sample(self.seed, index).map_err(js)?;
        Ok(())
    }

    #[wasm_bindgen(js_name = imageRgba)]
    pub fn image_rgba(&self) -> Result<Vec<u8>, JsError> {
        render::image_to_rgba8(&self.sample.image).map_err(js)
    }

    /// Predicted classes painted with the class palette.
    #[wasm_bindgen(js_name = predictionRgba)]
    pub fn prediction_rgba(&self) -> Result<Vec<u8>, JsError> {
        let pass = self.model.forward(&self.sample.image).map_err(js)?;
        let mask = predict_mask(pass.logits()).map_err(js)?;
        let palette = render::class_palette(self.model.num_classes());
        Ok(mask
            .ids()
            .iter()
            .flat_map(|&c| {
                let [r, g, b] = palette[c as usize];
                [r, g, b, 255]
            })
            .collect())
    }

    /// Trains the current model for `epochs` on `count` fresh samples and
    /// returns the last epoch's mean IoU.
    pub fn train(&mut self, count: usize, epochs: usize) -> Result<f64, JsError> {
        let spec = DatasetSpec { seed: self.seed.wrapping_add(1), count, size: DEMO_SIZE };
        let samples = data::generate(&spec).map_err(js)?;
        let cfg = TrainConfig { epochs, seed: self.seed, ..TrainConfig::default() };
        let (model, history) = train::train(self.model.clone(), &samples, &cfg, |_| {}).map_err(js)?;
        self.model = model;
        Ok(history.last().map_or(0.0, |m| m.mean_iou))
    }

    /// Replaces the model with a checkpoint's (any size divisible by its
    /// depth works; the demo image stays 32 px).
    #[wasm_bindgen(js_name = loadCheckpoint)]
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), JsError> {
        let ckpt = Checkpoint::from_bytes(bytes).map_err(js)?;
        ckpt.model.config().check_input_size(DEMO_SIZE, DEMO_SIZE).map_err(js)?;
        self.model = ckpt.model;
        Ok(())
    }

    /// Heatmap overlay for `class_id` at pixel `(i, j)` through `tap`, with the
    /// pixel marked white.
    pub fn explain(&self, i: usize, j: usize, class_id: usize, tap: &str) -> Result<Vec<u8>, JsError> {
        let request = ExplainRequest::new(class_id, tap, PixelSet::Single { i, j });
        let heat = seg_grad_cam(&self.model, &self.sample.image, &request).map_err(js)?;
        let overlay = render::colorize_overlay(&self.sample.image, &heat.upsampled).map_err(js)?;
        let overlay = render::mark_pixel(&overlay, i, j).map_err(js)?;
        render::image_to_rgba8(&overlay).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operations_produce_canvas_sized_buffers() {
        let mut wb = Workbench::new(3).unwrap();
        let n = 4 * DEMO_SIZE * DEMO_SIZE;
        wb.generate(2).unwrap();
        assert_eq!(wb.image_rgba().unwrap().len(), n);
        assert_eq!(wb.prediction_rgba().unwrap().len(), n);
        let miou = wb.train(4, 1).unwrap();
        assert!((0.0..=1.0).contains(&miou));
        let overlay = wb.explain(5, 7, 1, "bottleneck.conv2").unwrap();
        assert_eq!(overlay.len(), n);
        assert_eq!(&overlay[4 * (5 * DEMO_SIZE + 7)..][..4], &[255, 255, 255, 255]);
    }

    #[test]
    fn checkpoints_round_trip_into_the_demo() {
        let mut wb = Workbench::new(1).unwrap();
        let ckpt = Checkpoint {
            model: Model::init(UNetConfig::default(), 9).unwrap(),
            class_names: wb.class_names(),
            training: None,
        };
        wb.load_checkpoint(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(wb.model, ckpt.model);
    }
}
