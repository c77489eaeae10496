use super::{Localizer, LocalizerOutput, LuNetConfig, UNet, UNetOutput};
use crate::diffcore::{NormalizedBox, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{BoundingBox, ImageGrid, LabelMask, PixelSpacing};

const LOCALIZER_PREFIX: &str = "localizer.";
const SEGMENTER_PREFIX: &str = "segmenter.";

/// Where the crop box comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum BoxSource {
    /// The localizer's own prediction (normal operation).
    Predicted,
    /// One fixed box per batch item, e.g. the reference box with margin.
    Given(Vec<NormalizedBox>),
}

/// Localizer and segmenter; the two share no parameters.
#[derive(Debug, Clone)]
pub struct LuNet {
    config: LuNetConfig,
    localizer: Localizer,
    segmenter: UNet,
}

#[derive(Debug, Clone, Copy)]
pub struct LuNetOutput {
    pub localizer: LocalizerOutput,
    /// Raw boxes used for cropping, `[N, 4]`.
    pub boxes: Var,
    /// Resampled crops, `[N, C, h, w]`.
    pub crops: Var,
    pub roi: UNetOutput,
}

/// Inference result for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LuNetPrediction {
    /// Sanitized crop box, normalized.
    pub normalized_box: NormalizedBox,
    /// Crop box in pixels, clipped to the image.
    pub pixel_box: BoundingBox,
    /// Segmenter labels at crop resolution.
    pub roi_labels: LabelMask,
    /// Final labels in the input image frame.
    pub label_map: LabelMask,
    /// Labels from the localizer's own segmentation output.
    pub localizer_labels: LabelMask,
}

impl LuNet {
    pub fn new(config: LuNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let localizer = Localizer::new(config.localizer.clone(), seed)?;
        let segmenter = UNet::new(config.segmenter.clone(), seed.wrapping_add(0x9E37_79B9_7F4A_7C15))?;
        Ok(Self {
            config,
            localizer,
            segmenter,
        })
    }

    pub fn config(&self) -> &LuNetConfig {
        &self.config
    }

    pub fn localizer(&self) -> &Localizer {
        &self.localizer
    }

    pub fn localizer_mut(&mut self) -> &mut Localizer {
        &mut self.localizer
    }

    pub fn segmenter(&self) -> &UNet {
        &self.segmenter
    }

    pub fn segmenter_mut(&mut self) -> &mut UNet {
        &mut self.segmenter
    }

    pub fn stores(&self) -> [&ParamStore; 2] {
        [self.localizer.params(), self.segmenter.params()]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 2] {
        [self.localizer.params_mut(), self.segmenter.params_mut()]
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        loc_params: &[Var],
        seg_params: &[Var],
        images: Var,
        source: &BoxSource,
    ) -> Result<LuNetOutput> {
        let n = tape.shape(images)[0];
        let localizer = self.localizer.forward(tape, loc_params, images)?;
        let boxes = match source {
            BoxSource::Predicted => localizer.boxes,
            BoxSource::Given(b) => {
                if b.len() != n {
                    return Err(Error::ShapeMismatch(format!("{} boxes for a batch of {n}", b.len())));
                }
                let data = b.iter().flat_map(|b| b.to_array()).collect();
                tape.constant(Tensor::new(vec![n, 4], data)?)
            }
        };
        let (ch, cw) = self.config.crop_size;
        let crops = tape.crop_resize(images, boxes, ch, cw)?;
        let roi = self.segmenter.forward(tape, seg_params, crops)?;
        Ok(LuNetOutput {
            localizer,
            boxes,
            crops,
            roi,
        })
    }

    /// Stacks single-channel images into `[N, 1, H, W]`.
    pub fn batch_tensor(images: &[&ImageGrid]) -> Result<Tensor> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::ShapeMismatch("images in a batch differ in size".into()));
            }
            data.extend_from_slice(img.pixels());
        }
        Tensor::new(vec![images.len(), 1, h, w], data)
    }

    pub fn predict(&self, images: &[&ImageGrid]) -> Result<Vec<LuNetPrediction>> {
        self.predict_with(images, &BoxSource::Predicted)
    }

    pub fn predict_with(&self, images: &[&ImageGrid], source: &BoxSource) -> Result<Vec<LuNetPrediction>> {
        let mut tape = Tape::new();
        let lp = self.localizer.params().bind(&mut tape, false);
        let sp = self.segmenter.params().bind(&mut tape, false);
        let x = tape.constant(Self::batch_tensor(images)?);
        let out = self.forward(&mut tape, &lp, &sp, x, source)?;
        let (h, w) = self.config.localizer.backbone.input_size;
        let (ch, cw) = self.config.crop_size;
        let raw = tape.value(out.boxes).data().to_vec();
        let roi_probs = tape.value(out.roi.probs);
        let loc_probs = tape.value(out.localizer.seg_probs);
        let mut preds = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let spacing = img.spacing();
            let nb =
                NormalizedBox::from_array([raw[4 * i], raw[4 * i + 1], raw[4 * i + 2], raw[4 * i + 3]]).sanitize(h, w);
            let full = BoundingBox::full(h, w);
            let b = BoundingBox::from_normalized(nb.to_array(), h, w);
            let pixel_box = BoundingBox {
                x_min: b.x_min.clamp(0.0, full.x_max),
                x_max: b.x_max.clamp(0.0, full.x_max),
                y_min: b.y_min.clamp(0.0, full.y_max),
                y_max: b.y_max.clamp(0.0, full.y_max),
            };
            let crop_spacing = PixelSpacing {
                dx: spacing.dx * pixel_box.height() / ch as f64,
                dy: spacing.dy * pixel_box.width() / cw as f64,
            };
            let roi_labels = argmax_labels(roi_probs, i, crop_spacing)?;
            let label_map = remap_to_original(&roi_labels, &pixel_box, (h, w), spacing)?;
            preds.push(LuNetPrediction {
                normalized_box: nb,
                pixel_box,
                roi_labels,
                label_map,
                localizer_labels: argmax_labels(loc_probs, i, spacing)?,
            });
        }
        Ok(preds)
    }

    /// Both networks in one store, names prefixed `localizer.` and `segmenter.`.
    pub fn combined_params(&self) -> ParamStore {
        let mut all = self.localizer.params().prefixed(LOCALIZER_PREFIX);
        all.extend(self.segmenter.params().prefixed(SEGMENTER_PREFIX));
        all
    }

    pub fn load_combined(&mut self, store: &ParamStore) -> Result<()> {
        self.localizer
            .params_mut()
            .load_values(&store.strip_prefix(LOCALIZER_PREFIX))?;
        self.segmenter
            .params_mut()
            .load_values(&store.strip_prefix(SEGMENTER_PREFIX))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.combined_params().save(path)
    }

    pub fn load(config: LuNetConfig, path: &std::path::Path) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.load_combined(&ParamStore::load(path)?)?;
        Ok(net)
    }
}

/// Per-pixel argmax of item `i` of `[N, 3, H, W]` probabilities; ties go to the lower class.
pub(crate) fn argmax_labels(probs: &Tensor, i: usize, spacing: PixelSpacing) -> Result<LabelMask> {
    let (_, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let item = &probs.data()[i * c * hw..(i + 1) * c * hw];
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if item[k * hw + p] > item[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, labels, spacing)
}

/// Places crop-resolution labels back into an `out_size` image: each pixel
/// whose center lies inside `bbox` takes the label of its nearest crop pixel,
/// everything else is background.
pub fn remap_to_original(
    roi_labels: &LabelMask,
    bbox: &BoundingBox,
    out_size: (usize, usize),
    spacing: PixelSpacing,
) -> Result<LabelMask> {
    let (h, w) = out_size;
    const TOL: f64 = 1e-9;
    if bbox.x_min < -TOL || bbox.y_min < -TOL || bbox.x_max > h as f64 + TOL || bbox.y_max > w as f64 + TOL {
        return Err(Error::BoxOutOfBounds(format!("{bbox:?} in a {h}x{w} image")));
    }
    let (rh, rw) = (roi_labels.height(), roi_labels.width());
    let mut out = LabelMask::zeros(h, w, spacing);
    let (bh, bw) = (bbox.height(), bbox.width());
    if bh <= 0.0 || bw <= 0.0 {
        return Ok(out);
    }
    let cols: Vec<Option<usize>> = (0..w)
        .map(|c| {
            let y = c as f64 + 0.5;
            (y >= bbox.y_min && y < bbox.y_max)
                .then(|| (((y - bbox.y_min) / bw * rw as f64).floor() as usize).min(rw - 1))
        })
        .collect();
    for r in 0..h {
        let x = r as f64 + 0.5;
        if x < bbox.x_min || x >= bbox.x_max {
            continue;
        }
        let i = (((x - bbox.x_min) / bh * rh as f64).floor() as usize).min(rh - 1);
        for (c, j) in cols.iter().enumerate() {
            if let Some(j) = j {
                out.set(r, c, roi_labels.get(i, *j));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{LocalizerConfig, TaskMode, UNetConfig};

    pub(crate) fn tiny_config() -> LuNetConfig {
        LuNetConfig {
            localizer: LocalizerConfig {
                backbone: UNetConfig::new(2, 4, (32, 32)),
                head_units: vec![8, 4],
                mode: TaskMode::Mu,
            },
            segmenter: UNetConfig::new(2, 4, (16, 16)),
            margin: 0.05,
            crop_size: (16, 16),
        }
    }

    fn image(seed: usize) -> ImageGrid {
        let px = (0..32 * 32)
            .map(|i| ((i * 31 + seed * 17) % 97) as f64 / 96.0)
            .collect();
        ImageGrid::new(32, 32, px, PixelSpacing::isotropic(0.5)).unwrap()
    }

    #[test]
    fn prediction_contract() {
        let net = LuNet::new(tiny_config(), 5).unwrap();
        let imgs = [image(0), image(1)];
        let preds = net.predict(&[&imgs[0], &imgs[1]]).unwrap();
        assert_eq!(preds.len(), 2);
        for p in &preds {
            assert_eq!((p.label_map.height(), p.label_map.width()), (32, 32));
            assert!(p.label_map.labels().iter().all(|&l| l <= 2));
            for r in 0..32 {
                for c in 0..32 {
                    let (x, y) = (r as f64 + 0.5, c as f64 + 0.5);
                    let inside = x >= p.pixel_box.x_min
                        && x < p.pixel_box.x_max
                        && y >= p.pixel_box.y_min
                        && y < p.pixel_box.y_max;
                    if !inside {
                        assert_eq!(p.label_map.get(r, c), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn parameters_are_disjoint() {
        let net = LuNet::new(tiny_config(), 5).unwrap();
        let all = net.combined_params();
        assert_eq!(
            all.len(),
            net.localizer().params().len() + net.segmenter().params().len()
        );
        let mut names = all.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), all.len());
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = LuNet::new(tiny_config(), 5).unwrap();
        let path = dir.path().join("m.bin");
        net.save(&path).unwrap();
        let back = LuNet::load(tiny_config(), &path).unwrap();
        assert_eq!(back.combined_params().to_bytes(), net.combined_params().to_bytes());
    }

    #[test]
    fn remap_identity_and_background() {
        let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
        let roi = LabelMask::new(8, 8, labels, PixelSpacing::default()).unwrap();
        let full = BoundingBox::full(8, 8);
        assert_eq!(
            remap_to_original(&roi, &full, (8, 8), PixelSpacing::default()).unwrap(),
            roi
        );

        let inner = BoundingBox::new(2.0, 6.0, 1.0, 5.0).unwrap();
        let out = remap_to_original(&roi, &inner, (10, 10), PixelSpacing::default()).unwrap();
        assert_eq!(out.get(0, 0), 0);
        assert_eq!(out.get(9, 9), 0);
        assert_eq!(out.get(1, 3), 0);

        let outside = BoundingBox::new(2.0, 12.0, 0.0, 5.0).unwrap();
        assert!(matches!(
            remap_to_original(&roi, &outside, (10, 10), PixelSpacing::default()),
            Err(Error::BoxOutOfBounds(_))
        ));
    }
}
