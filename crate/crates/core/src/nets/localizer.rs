use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, Dense};
use super::unet::UNetBody;
use super::LocalizerConfig;
use crate::diffcore::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Spatial size at which the branch stops halving.
const BRANCH_TARGET: usize = 4;

/// U-L2 localizer: a U-Net whose class logits feed a strided-conv branch
/// and a dense head regressing four normalized box coordinates.
#[derive(Debug, Clone)]
pub struct Localizer {
    config: LocalizerConfig,
    backbone: UNetBody,
    branch: Vec<Conv>,
    head: Vec<Dense>,
    params: ParamStore,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalizerOutput {
    pub seg_logits: Var,
    /// Backbone class probabilities, `[N, 3, H, W]`.
    pub seg_probs: Var,
    /// Sigmoid box coordinates `(x_min, x_max, y_min, y_max)`, `[N, 4]`.
    pub boxes: Var,
}

impl Localizer {
    pub fn new(config: LocalizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = UNetBody::build(&config.backbone, &mut params, &mut rng, "backbone.");

        let (mut h, mut w) = config.backbone.input_size;
        let mut c = config.backbone.classes;
        let mut branch = Vec::new();
        let cap = config.backbone.base_filters * 8;
        while h > BRANCH_TARGET || w > BRANCH_TARGET {
            let c_out = (config.backbone.base_filters << branch.len()).min(cap);
            branch.push(Conv::new(
                &mut params,
                &mut rng,
                &format!("branch.{}", branch.len()),
                c,
                c_out,
                3,
                2,
            ));
            c = c_out;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let mut d_in = c * h * w;
        let mut head = Vec::with_capacity(config.head_units.len());
        for (i, &units) in config.head_units.iter().enumerate() {
            head.push(Dense::new(&mut params, &mut rng, &format!("head.{i}"), d_in, units));
            d_in = units;
        }
        Ok(Self {
            config,
            backbone,
            branch,
            head,
            params,
        })
    }

    pub fn config(&self) -> &LocalizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the last dense layer so every prediction is the centered point box.
    pub fn zero_final_layer(&mut self) {
        let last = *self.head.last().expect("head has at least one layer");
        for i in [last.weight_index(), last.bias_index()] {
            self.params.get_mut(i).data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<LocalizerOutput> {
        let cfg = &self.config.backbone;
        let (_, c, h, w) = tape.value(x).dims4()?;
        if (h, w) != cfg.input_size || c != cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "localizer expects [N, {}, {}, {}], got {:?}",
                cfg.in_channels,
                cfg.input_size.0,
                cfg.input_size.1,
                tape.shape(x)
            )));
        }
        let body = self.backbone.forward(tape, p, x)?;
        let seg_probs = tape.channel_softmax(body.logits)?;
        let mut y = body.logits;
        for conv in &self.branch {
            let z = conv.forward(tape, p, y)?;
            y = tape.relu(z);
        }
        y = tape.flatten(y)?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            y = layer.forward(tape, p, y)?;
            y = if i == last { tape.sigmoid(y) } else { tape.relu(y) };
        }
        Ok(LocalizerOutput {
            seg_logits: body.logits,
            seg_probs,
            boxes: y,
        })
    }
}
