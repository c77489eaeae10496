use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Conv;
use super::UNetConfig;
use crate::diffcore::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Encoder of conv-conv-pool blocks doubling the filters at each level, a
/// bottleneck, and a decoder of nearest-upsample, skip concatenation and two
/// convolutions. A 1x1 convolution produces class logits.
#[derive(Debug, Clone)]
pub(crate) struct UNetBody {
    encoder: Vec<[Conv; 2]>,
    bottleneck: [Conv; 2],
    decoder: Vec<[Conv; 2]>,
    classifier: Conv,
}

pub struct BodyOutput {
    pub logits: Var,
}

impl UNetBody {
    pub fn build(config: &UNetConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str) -> Self {
        let f = |l: usize| config.base_filters << l;
        let mut encoder = Vec::with_capacity(config.levels);
        let mut c_in = config.in_channels;
        for l in 0..config.levels {
            encoder.push([
                Conv::new(store, rng, &format!("{prefix}enc{l}.conv1"), c_in, f(l), 3, 1),
                Conv::new(store, rng, &format!("{prefix}enc{l}.conv2"), f(l), f(l), 3, 1),
            ]);
            c_in = f(l);
        }
        let fb = f(config.levels);
        let bottleneck = [
            Conv::new(store, rng, &format!("{prefix}bottom.conv1"), c_in, fb, 3, 1),
            Conv::new(store, rng, &format!("{prefix}bottom.conv2"), fb, fb, 3, 1),
        ];
        let mut decoder = Vec::with_capacity(config.levels);
        let mut c_up = fb;
        for l in (0..config.levels).rev() {
            decoder.push([
                Conv::new(store, rng, &format!("{prefix}dec{l}.conv1"), c_up + f(l), f(l), 3, 1),
                Conv::new(store, rng, &format!("{prefix}dec{l}.conv2"), f(l), f(l), 3, 1),
            ]);
            c_up = f(l);
        }
        let classifier = Conv::new(store, rng, &format!("{prefix}classifier"), f(0), config.classes, 1, 1);
        Self {
            encoder,
            bottleneck,
            decoder,
            classifier,
        }
    }

    fn double(tape: &mut Tape, p: &[Var], convs: &[Conv; 2], x: Var) -> Result<Var> {
        let y = convs[0].forward(tape, p, x)?;
        let y = tape.relu(y);
        let y = convs[1].forward(tape, p, y)?;
        Ok(tape.relu(y))
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<BodyOutput> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            let y = Self::double(tape, p, block, h)?;
            skips.push(y);
            h = tape.maxpool2d(y)?;
        }
        h = Self::double(tape, p, &self.bottleneck, h)?;
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let up = tape.nearest_upsample2x(h)?;
            let cat = tape.concat_channels(up, skip)?;
            h = Self::double(tape, p, block, cat)?;
        }
        let logits = self.classifier.forward(tape, p, h)?;
        Ok(BodyOutput { logits })
    }
}

/// Standalone segmentation U-Net with its own parameters.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    body: UNetBody,
    params: ParamStore,
}

#[derive(Debug, Clone, Copy)]
pub struct UNetOutput {
    pub logits: Var,
    /// Per-pixel class probabilities, `[N, 3, H, W]`.
    pub probs: Var,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let body = UNetBody::build(&config, &mut params, &mut rng, "");
        Ok(Self { config, body, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `p` are this network's parameters bound on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<UNetOutput> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if (h, w) != self.config.input_size || c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "U-Net expects [N, {}, {}, {}], got {:?}",
                self.config.in_channels,
                self.config.input_size.0,
                self.config.input_size.1,
                tape.shape(x)
            )));
        }
        let out = self.body.forward(tape, p, x)?;
        let probs = tape.channel_softmax(out.logits)?;
        Ok(UNetOutput {
            logits: out.logits,
            probs,
        })
    }
}
