//! The completion generator, the two discriminators and the identity embedder.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::layers::{Conv2d, ConvTranspose2d, Linear};
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::NnError;
use crate::image::Image;
use crate::rng;

pub const GENERATOR_GROUP: u32 = 1;
pub const GLOBAL_D_GROUP: u32 = 2;
pub const LOCAL_D_GROUP: u32 = 3;
pub const EMBED_GROUP: u32 = 4;

pub const GENERATOR_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const DISCRIMINATOR_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const LEAKY_SLOPE: f64 = 0.2;
pub const EMBED_DIM: usize = 32;
pub const EMBED_SIDE: usize = 32;

/// Interleaved RGB image to a planar `[3, H, W]` buffer.
pub fn image_to_planar(image: &Image) -> Vec<f64> {
    let plane = image.width() * image.height();
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in image.data().chunks(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c];
        }
    }
    out
}

/// Planar `[3, H, W]` buffer back to an image.
pub fn planar_to_image(planar: &[f64], width: usize, height: usize) -> Image {
    let plane = width * height;
    Image::from_fn(width, height, |x, y| core::array::from_fn(|c| planar[c * plane + y * width + x]))
}

/// Encoder-decoder with stride-2 stages and mirrored skip connections:
/// the output of encoder stage `k` is concatenated onto the output of
/// decoder stage `K - k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub store: ParamStore,
    encoder: Vec<Conv2d>,
    decoder: Vec<ConvTranspose2d>,
    widths: Vec<usize>,
    in_channels: usize,
}

impl GeneratorNet {
    pub fn new(seed: u64) -> Self {
        Self::with_widths(6, &GENERATOR_WIDTHS, seed)
    }

    pub fn with_widths(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        assert!(!widths.is_empty());
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new(GENERATOR_GROUP);
        let k = widths.len();
        let mut encoder = Vec::with_capacity(k);
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(Conv2d::new(&mut store, &format!("enc{i}"), cin, w, 4, 2, 1, &mut rng));
            cin = w;
        }
        let mut decoder = Vec::with_capacity(k);
        for j in 0..k {
            let cin = if j == 0 { widths[k - 1] } else { 2 * widths[k - 1 - j] };
            let cout = if j + 1 < k { widths[k - 2 - j] } else { 3 };
            decoder.push(ConvTranspose2d::new(&mut store, &format!("dec{j}"), cin, cout, 4, 2, 1, &mut rng));
        }
        Self { store, encoder, decoder, widths: widths.to_vec(), in_channels }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Minimum input side: every stage halves the resolution.
    pub fn min_side(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn spec(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| format!("{w}")).collect();
        format!("generator in={} widths={}", self.in_channels, widths.join(","))
    }

    /// `x: [N, in_channels, H, W]` to `[N, 3, H, W]` in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var, NnError> {
        let s = tape.shape(x).to_vec();
        let side = self.min_side();
        if s.len() != 4 || s[1] != self.in_channels || s[2] % side != 0 || s[3] % side != 0 || s[2] == 0 || s[3] == 0 {
            return Err(NnError::Shape(format!("generator input {s:?} needs {} channels and sides divisible by {side}", self.in_channels)));
        }
        let k = self.encoder.len();
        let mut skips = Vec::with_capacity(k);
        let mut h = x;
        for conv in &self.encoder {
            let c = conv.forward(tape, &self.store, h, trainable)?;
            h = tape.leaky_relu(c, LEAKY_SLOPE)?;
            skips.push(h);
        }
        let mut d = skips[k - 1];
        for (j, deconv) in self.decoder.iter().enumerate() {
            if j > 0 {
                d = tape.concat_channels(d, skips[k - 1 - j])?;
            }
            let c = deconv.forward(tape, &self.store, d, trainable)?;
            d = if j + 1 < k { tape.relu(c)? } else { tape.sigmoid(c)? };
        }
        Ok(d)
    }
}

/// Stacked stride-2 convolutions down to 4x4, then a linear head and a
/// sigmoid giving one probability per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
    in_channels: usize,
    side: usize,
}

impl DiscriminatorNet {
    /// `side` must be a power of two of at least 8.
    pub fn new(group: u32, in_channels: usize, side: usize, seed: u64) -> Result<Self, NnError> {
        if side < 8 || !side.is_power_of_two() {
            return Err(NnError::Shape(format!("discriminator side {side} must be a power of two >= 8")));
        }
        let stages = (side / 4).trailing_zeros() as usize;
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new(group);
        let mut convs = Vec::with_capacity(stages);
        let mut cin = in_channels;
        for i in 0..stages {
            let w = DISCRIMINATOR_WIDTHS[i.min(DISCRIMINATOR_WIDTHS.len() - 1)];
            convs.push(Conv2d::new(&mut store, &format!("conv{i}"), cin, w, 4, 2, 1, &mut rng));
            cin = w;
        }
        let head = Linear::new(&mut store, "head", cin * 16, 1, &mut rng);
        Ok(Self { store, convs, head, in_channels, side })
    }

    /// Global discriminator over the full UV plus condition channels.
    pub fn global(side: usize, seed: u64) -> Result<Self, NnError> {
        Self::new(GLOBAL_D_GROUP, 6, side, seed)
    }

    /// Local discriminator over the central crop.
    pub fn local(side: usize, seed: u64) -> Result<Self, NnError> {
        Self::new(LOCAL_D_GROUP, 6, side, seed)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn spec(&self) -> String {
        format!("discriminator in={} side={} stages={}", self.in_channels, self.side, self.convs.len())
    }

    /// `x: [N, in_channels, side, side]` to `[N, 1]` in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var, NnError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.side || s[3] != self.side {
            return Err(NnError::Shape(format!("discriminator input {s:?}, expected {} x {}^2", self.in_channels, self.side)));
        }
        let mut h = x;
        for conv in &self.convs {
            let c = conv.forward(tape, &self.store, h, trainable)?;
            h = tape.leaky_relu(c, LEAKY_SLOPE)?;
        }
        let flat_len = tape.shape(h)[1..].iter().product::<usize>();
        let flat = tape.reshape(h, &[s[0], flat_len])?;
        let logit = self.head.forward(tape, &self.store, flat, trainable)?;
        tape.sigmoid(logit)
    }
}

/// Small convolutional classifier whose penultimate layer is the identity
/// embedding. Class centres are the mean training embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedNet {
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    embed: Linear,
    classifier: Linear,
    pub centers: Vec<Vec<f64>>,
    frozen: bool,
    dim: usize,
    n_classes: usize,
}

impl EmbedNet {
    pub fn new(n_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new(EMBED_GROUP);
        let widths = [16, 32, 32];
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("conv{i}"), cin, w, 4, 2, 1, &mut rng));
            cin = w;
        }
        let side = EMBED_SIDE >> widths.len();
        let embed = Linear::new(&mut store, "embed", cin * side * side, dim, &mut rng);
        let classifier = Linear::new(&mut store, "classifier", dim, n_classes, &mut rng);
        Self { store, convs, embed, classifier, centers: vec![vec![0.0; dim]; n_classes], frozen: false, dim, n_classes }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn spec(&self) -> String {
        format!("embedder side={EMBED_SIDE} dim={} classes={}", self.dim, self.n_classes)
    }

    /// `x: [N, 3, 32, 32]` to embeddings `[N, dim]`.
    pub fn embed(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var, NnError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != EMBED_SIDE || s[3] != EMBED_SIDE {
            return Err(NnError::Shape(format!("embedder input {s:?}, expected 3 x {EMBED_SIDE}^2")));
        }
        let trainable = trainable && !self.frozen;
        let mut h = x;
        for conv in &self.convs {
            let c = conv.forward(tape, &self.store, h, trainable)?;
            h = tape.leaky_relu(c, LEAKY_SLOPE)?;
        }
        let flat_len = tape.shape(h)[1..].iter().product::<usize>();
        let flat = tape.reshape(h, &[s[0], flat_len])?;
        self.embed.forward(tape, &self.store, flat, trainable)
    }

    pub fn logits(&self, tape: &mut Tape, embedding: Var, trainable: bool) -> Result<Var, NnError> {
        let trainable = trainable && !self.frozen;
        self.classifier.forward(tape, &self.store, embedding, trainable)
    }

    /// Embeds images whose sides are a multiple of 32 (box-pooled first).
    pub fn embed_images(&self, images: &[Image]) -> Result<Vec<Vec<f64>>, NnError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut input = Vec::with_capacity(chunk.len() * 3 * EMBED_SIDE * EMBED_SIDE);
            for img in chunk {
                input.extend(image_to_planar(&embedder_view(img)?));
            }
            let mut tape = Tape::new();
            let x = tape.constant(input, &[chunk.len(), 3, EMBED_SIDE, EMBED_SIDE])?;
            let e = self.embed(&mut tape, x, false)?;
            out.extend(tape.value(e).chunks(self.dim).map(|c| c.to_vec()));
        }
        Ok(out)
    }

    /// Index of the highest logit per image.
    pub fn classify(&self, images: &[Image]) -> Result<Vec<usize>, NnError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut input = Vec::new();
            for img in chunk {
                input.extend(image_to_planar(&embedder_view(img)?));
            }
            let mut tape = Tape::new();
            let x = tape.constant(input, &[chunk.len(), 3, EMBED_SIDE, EMBED_SIDE])?;
            let e = self.embed(&mut tape, x, false)?;
            let l = self.logits(&mut tape, e, false)?;
            for row in tape.value(l).chunks(self.n_classes) {
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Box-pools an image down to the embedder's input side.
pub fn embedder_view(image: &Image) -> Result<Image, NnError> {
    let (w, h) = image.dims();
    if w != h || w % EMBED_SIDE != 0 || w == 0 {
        return Err(NnError::Shape(format!("embedder needs a square image with side divisible by {EMBED_SIDE}, got {w}x{h}")));
    }
    Ok(if w == EMBED_SIDE { image.clone() } else { image.downsample_box(w / EMBED_SIDE) })
}
