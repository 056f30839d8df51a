//! The nine fully-connected networks and their checkpoint format.
//!
//! Image features are consumed as-is (the image encoder is a pass-through);
//! text goes through a single affine embedding layer. Outer generators map
//! between modality features and expose their 256-wide middle activation as
//! the common representation `Z`. Inner generators map between the two `Z`
//! spaces and expose their K-wide tanh layer as the continuous hash `H`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, malformed, read_err};
use crate::error::{Error, Result};
use crate::ndcore::{Graph, Matrix, ParamKey, Var, PROB_EPS};

/// Width of the shared common space.
pub const COMMON_DIM: usize = 256;
/// Allowed hash code lengths.
pub const CODE_BITS: [usize; 4] = [8, 16, 32, 64];

const CHECKPOINT_MAGIC: &[u8; 8] = b"UCHCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// A hidden layer whose activation is exported alongside the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tap {
    /// Index into the width list; must be a hidden layer.
    pub layer: usize,
    /// Activation used at the tap instead of the hidden default.
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub tap: Option<Tap>,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::contract("an MLP needs at least two widths"));
        }
        if self.widths.contains(&0) {
            return Err(Error::contract("MLP widths must be positive"));
        }
        if let Some(tap) = self.tap {
            if tap.layer == 0 || tap.layer >= self.widths.len() - 1 {
                return Err(Error::contract(format!(
                    "tap layer {} is not a hidden layer of {:?}",
                    tap.layer, self.widths
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn activation_after(&self, layer: usize) -> Activation {
        // `layer` counts affine maps; its output is width index `layer + 1`.
        let width_index = layer + 1;
        if width_index == self.widths.len() - 1 {
            self.output
        } else {
            match self.tap {
                Some(t) if t.layer == width_index => t.activation,
                _ => self.hidden,
            }
        }
    }
}

/// Parameters of one multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

/// Output of a forward pass, plus the tap activation when the spec has one.
#[derive(Clone, Copy, Debug)]
pub struct MlpOutput {
    pub out: Var,
    pub tap: Option<Var>,
}

impl Mlp {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.layers());
        let mut biases = Vec::with_capacity(spec.layers());
        for pair in spec.widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound) as f32 as f64)
                .collect();
            weights.push(Matrix::new(fan_in, fan_out, values)?);
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn from_parts(spec: MlpSpec, weights: Vec<Matrix>, biases: Vec<Matrix>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.layers() || biases.len() != spec.layers() {
            return Err(Error::contract("layer count does not match the spec"));
        }
        for (i, pair) in spec.widths.windows(2).enumerate() {
            if weights[i].shape() != (pair[0], pair[1]) {
                return Err(Error::Shape {
                    op: "mlp weight",
                    left: weights[i].shape(),
                    right: (pair[0], pair[1]),
                });
            }
            if biases[i].shape() != (1, pair[1]) {
                return Err(Error::Shape {
                    op: "mlp bias",
                    left: biases[i].shape(),
                    right: (1, pair[1]),
                });
            }
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Matrix {
        &self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.biases[layer]
    }

    pub fn input_width(&self) -> usize {
        self.spec.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.spec.widths.last().unwrap()
    }

    /// Records the forward pass. With `keys`, weights are registered as
    /// trainable parameters; otherwise they enter as constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        keys: Option<&dyn Fn(usize, bool) -> ParamKey>,
    ) -> Result<MlpOutput> {
        let (_, width) = g.shape(x);
        if width != self.input_width() {
            return Err(Error::Shape {
                op: "mlp input",
                left: g.shape(x),
                right: (g.shape(x).0, self.input_width()),
            });
        }
        let mut h = x;
        let mut tap = None;
        for layer in 0..self.spec.layers() {
            let (w, b) = match keys {
                Some(key) => (
                    g.param(key(layer, false), &self.weights[layer]),
                    g.param(key(layer, true), &self.biases[layer]),
                ),
                None => (
                    g.constant(self.weights[layer].clone()),
                    g.constant(self.biases[layer].clone()),
                ),
            };
            let pre = g.affine(h, w, b)?;
            h = self.spec.activation_after(layer).apply(g, pre);
            if matches!(self.spec.tap, Some(t) if t.layer == layer + 1) {
                tap = Some(h);
            }
        }
        Ok(MlpOutput { out: h, tap })
    }
}

/// Identifies one of the nine networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NetKind {
    /// Text embedding layer.
    TextEncoder,
    /// Outer generator, image features to text features.
    OuterGenImageToText,
    /// Outer generator, text features to image features.
    OuterGenTextToImage,
    /// Outer discriminator on image features.
    OuterDiscImage,
    /// Outer discriminator on text features.
    OuterDiscText,
    /// Inner generator, image-side Z to text-side Z.
    InnerGenImageToText,
    /// Inner generator, text-side Z to image-side Z.
    InnerGenTextToImage,
    /// Inner discriminator on image-side Z.
    InnerDiscImage,
    /// Inner discriminator on text-side Z.
    InnerDiscText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl NetKind {
    pub const ALL: [NetKind; 9] = [
        NetKind::TextEncoder,
        NetKind::OuterGenImageToText,
        NetKind::OuterGenTextToImage,
        NetKind::OuterDiscImage,
        NetKind::OuterDiscText,
        NetKind::InnerGenImageToText,
        NetKind::InnerGenTextToImage,
        NetKind::InnerDiscImage,
        NetKind::InnerDiscText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetKind::TextEncoder => "enc_t",
            NetKind::OuterGenImageToText => "gf_i2t",
            NetKind::OuterGenTextToImage => "gf_t2i",
            NetKind::OuterDiscImage => "df_i",
            NetKind::OuterDiscText => "df_t",
            NetKind::InnerGenImageToText => "gz_i2t",
            NetKind::InnerGenTextToImage => "gz_t2i",
            NetKind::InnerDiscImage => "dz_i",
            NetKind::InnerDiscText => "dz_t",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Modality whose learning rate drives this network: the modality it
    /// produces (generators) or judges (discriminators).
    pub fn modality(self) -> Modality {
        match self {
            NetKind::OuterGenTextToImage
            | NetKind::OuterDiscImage
            | NetKind::InnerGenTextToImage
            | NetKind::InnerDiscImage => Modality::Image,
            _ => Modality::Text,
        }
    }

    pub fn param_key(self, layer: usize, bias: bool) -> ParamKey {
        ParamKey(((self.index() as u32) << 16) | ((layer as u32) << 1) | bias as u32)
    }

    pub fn from_param_key(key: ParamKey) -> Option<(NetKind, usize, bool)> {
        let kind = *Self::ALL.get((key.0 >> 16) as usize)?;
        Some((kind, ((key.0 & 0xffff) >> 1) as usize, key.0 & 1 == 1))
    }
}

/// Set of networks, used to select which ones are trainable in a pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NetSet(u16);

impl NetSet {
    pub const NONE: NetSet = NetSet(0);
    pub const ALL: NetSet = NetSet((1 << 9) - 1);

    pub fn of(kinds: &[NetKind]) -> Self {
        NetSet(kinds.iter().fold(0, |acc, k| acc | 1 << k.index()))
    }

    pub fn contains(self, kind: NetKind) -> bool {
        self.0 & (1 << kind.index()) != 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Which discriminator to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Critic {
    FeatureImage,
    FeatureText,
    CommonImage,
    CommonText,
}

impl Critic {
    pub fn net(self) -> NetKind {
        match self {
            Critic::FeatureImage => NetKind::OuterDiscImage,
            Critic::FeatureText => NetKind::OuterDiscText,
            Critic::CommonImage => NetKind::InnerDiscImage,
            Critic::CommonText => NetKind::InnerDiscText,
        }
    }
}

/// Input/embedding widths and code length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkDims {
    pub image_dim: usize,
    /// Width of raw text vectors (vocabulary size for bag-of-words).
    pub text_dim: usize,
    pub text_embed_dim: usize,
    pub code_bits: usize,
}

impl NetworkDims {
    /// 4096-d CNN features and a 300-node text embedding.
    pub fn standard(vocab: usize, code_bits: usize) -> Self {
        Self {
            image_dim: 4096,
            text_dim: vocab,
            text_embed_dim: 300,
            code_bits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !CODE_BITS.contains(&self.code_bits) {
            return Err(Error::contract(format!(
                "code length {} not in {CODE_BITS:?}",
                self.code_bits
            )));
        }
        if self.image_dim == 0 || self.text_dim == 0 || self.text_embed_dim == 0 {
            return Err(Error::contract("network widths must be positive"));
        }
        Ok(())
    }

    pub fn spec(&self, kind: NetKind) -> MlpSpec {
        let outer_tap = Some(Tap {
            layer: 2,
            activation: Activation::Relu,
        });
        let hash_tap = Some(Tap {
            layer: 2,
            activation: Activation::Tanh,
        });
        let (widths, output, tap) = match kind {
            NetKind::TextEncoder => (
                vec![self.text_dim, self.text_embed_dim],
                Activation::Identity,
                None,
            ),
            NetKind::OuterGenImageToText => (
                vec![self.image_dim, 512, COMMON_DIM, 512, self.text_embed_dim],
                Activation::Identity,
                outer_tap,
            ),
            NetKind::OuterGenTextToImage => (
                vec![self.text_embed_dim, 512, COMMON_DIM, 512, self.image_dim],
                Activation::Identity,
                outer_tap,
            ),
            NetKind::OuterDiscImage => {
                (vec![self.image_dim, 256, 32, 1], Activation::Sigmoid, None)
            }
            NetKind::OuterDiscText => (
                vec![self.text_embed_dim, 256, 32, 1],
                Activation::Sigmoid,
                None,
            ),
            NetKind::InnerGenImageToText | NetKind::InnerGenTextToImage => (
                vec![COMMON_DIM, 128, self.code_bits, 128, COMMON_DIM],
                Activation::Identity,
                hash_tap,
            ),
            NetKind::InnerDiscImage | NetKind::InnerDiscText => {
                (vec![COMMON_DIM, 128, 32, 1], Activation::Sigmoid, None)
            }
        };
        MlpSpec {
            widths,
            hidden: Activation::Relu,
            output,
            tap,
        }
    }
}

/// All network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkBundle {
    dims: NetworkDims,
    nets: Vec<Mlp>,
}

impl NetworkBundle {
    /// Seeded initialisation; networks are drawn in [`NetKind::ALL`] order.
    pub fn init(dims: NetworkDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = NetKind::ALL
            .iter()
            .map(|&k| Mlp::init(dims.spec(k), &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { dims, nets })
    }

    pub fn dims(&self) -> NetworkDims {
        self.dims
    }

    pub fn net(&self, kind: NetKind) -> &Mlp {
        &self.nets[kind.index()]
    }

    pub fn net_mut(&mut self, kind: NetKind) -> &mut Mlp {
        &mut self.nets[kind.index()]
    }

    pub fn param(&self, key: ParamKey) -> Option<&Matrix> {
        let (kind, layer, bias) = NetKind::from_param_key(key)?;
        let net = self.net(kind);
        if layer >= net.spec().layers() {
            return None;
        }
        Some(if bias {
            net.bias(layer)
        } else {
            net.weight(layer)
        })
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Matrix> {
        let (kind, layer, bias) = NetKind::from_param_key(key)?;
        let net = self.net_mut(kind);
        if layer >= net.spec().layers() {
            return None;
        }
        Some(if bias {
            net.bias_mut(layer)
        } else {
            net.weight_mut(layer)
        })
    }

    /// Every tensor as `(name, key, value)` in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, ParamKey, &Matrix)> {
        let mut out = Vec::new();
        for kind in NetKind::ALL {
            let net = self.net(kind);
            for layer in 0..net.spec().layers() {
                out.push((
                    format!("{}.{layer}.weight", kind.name()),
                    kind.param_key(layer, false),
                    net.weight(layer),
                ));
                out.push((
                    format!("{}.{layer}.bias", kind.name()),
                    kind.param_key(layer, true),
                    net.bias(layer),
                ));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, m)| m.is_finite())
    }

    /// Forward pass through one network; `trainable` registers its weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        kind: NetKind,
        x: Var,
        trainable: bool,
    ) -> Result<MlpOutput> {
        let key = move |layer, bias| kind.param_key(layer, bias);
        let keys: Option<&dyn Fn(usize, bool) -> ParamKey> =
            if trainable { Some(&key) } else { None };
        self.net(kind).forward(g, x, keys)
    }

    /// Image features pass through unchanged after a width check.
    pub fn encode_image(&self, g: &Graph, images: Var) -> Result<Var> {
        let shape = g.shape(images);
        if shape.1 != self.dims.image_dim {
            return Err(Error::Shape {
                op: "encode_image",
                left: shape,
                right: (shape.0, self.dims.image_dim),
            });
        }
        Ok(images)
    }

    pub fn encode_text(&self, g: &mut Graph, texts: Var, trainable: bool) -> Result<Var> {
        Ok(self.forward(g, NetKind::TextEncoder, texts, trainable)?.out)
    }

    /// Outer generator: returns `(F_fake, Z_tap)`.
    pub fn gen_outer(
        &self,
        g: &mut Graph,
        dir: Direction,
        features: Var,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let kind = match dir {
            Direction::ImageToText => NetKind::OuterGenImageToText,
            Direction::TextToImage => NetKind::OuterGenTextToImage,
        };
        let o = self.forward(g, kind, features, trainable)?;
        Ok((o.out, o.tap.expect("outer generators have a tap")))
    }

    /// Inner generator: returns `(Z_fake, H_tap)`.
    pub fn gen_inner(
        &self,
        g: &mut Graph,
        dir: Direction,
        common: Var,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let kind = match dir {
            Direction::ImageToText => NetKind::InnerGenImageToText,
            Direction::TextToImage => NetKind::InnerGenTextToImage,
        };
        let o = self.forward(g, kind, common, trainable)?;
        Ok((o.out, o.tap.expect("inner generators have a tap")))
    }

    /// Per-item probability of "real", clamped to `[eps, 1 - eps]`.
    pub fn discriminate(
        &self,
        g: &mut Graph,
        critic: Critic,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let p = self.forward(g, critic.net(), x, trainable)?.out;
        Ok(g.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::Io {
            path: Default::default(),
            source: e,
        };
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        for (name, _, m) in self.tensors() {
            codec::write_u32(w, codec::count(name.len(), "tensor name length")?).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            codec::write_u32(w, codec::count(m.rows(), "rows")?).map_err(io)?;
            codec::write_u32(w, codec::count(m.cols(), "cols")?).map_err(io)?;
            for &v in m.as_slice() {
                codec::write_f32(w, v).map_err(io)?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint; dimensions are inferred from tensor shapes and
    /// every expected tensor must be present exactly once.
    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        const KIND: &str = "checkpoint";
        let rd = read_err(KIND);
        if !codec::expect_magic(r, CHECKPOINT_MAGIC).map_err(&rd)? {
            return Err(malformed(KIND, "bad magic"));
        }
        let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
        loop {
            let mut first = [0u8; 4];
            match r.read(&mut first[..1]) {
                Ok(0) => break,
                Ok(_) => {}
                Err(e) => return Err(rd(e)),
            }
            r.read_exact(&mut first[1..]).map_err(&rd)?;
            let name_len = u32::from_le_bytes(first) as usize;
            if name_len > 256 {
                return Err(malformed(KIND, format!("tensor name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(&rd)?;
            let name =
                String::from_utf8(name).map_err(|_| malformed(KIND, "tensor name is not UTF-8"))?;
            let rows = codec::read_u32(r).map_err(&rd)? as usize;
            let cols = codec::read_u32(r).map_err(&rd)? as usize;
            let mut values = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 24));
            for _ in 0..rows * cols {
                values.push(codec::read_f32(r).map_err(&rd)?);
            }
            if tensors
                .insert(name.clone(), Matrix::new(rows, cols, values)?)
                .is_some()
            {
                return Err(malformed(KIND, format!("duplicate tensor {name}")));
            }
        }
        let shape_of = |name: &str| {
            tensors
                .get(name)
                .map(Matrix::shape)
                .ok_or_else(|| malformed(KIND, format!("missing tensor {name}")))
        };
        let (text_dim, text_embed_dim) = shape_of("enc_t.0.weight")?;
        let image_dim = shape_of("gf_i2t.0.weight")?.0;
        let code_bits = shape_of("gz_i2t.1.weight")?.1;
        let dims = NetworkDims {
            image_dim,
            text_dim,
            text_embed_dim,
            code_bits,
        };
        dims.validate()
            .map_err(|e| malformed(KIND, e.to_string()))?;
        let mut nets = Vec::with_capacity(9);
        for kind in NetKind::ALL {
            let spec = dims.spec(kind);
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for layer in 0..spec.layers() {
                for (bias, dst) in [(false, &mut weights), (true, &mut biases)] {
                    let name = format!(
                        "{}.{layer}.{}",
                        kind.name(),
                        if bias { "bias" } else { "weight" }
                    );
                    let m = tensors
                        .remove(&name)
                        .ok_or_else(|| malformed(KIND, format!("missing tensor {name}")))?;
                    dst.push(m);
                }
            }
            nets.push(
                Mlp::from_parts(spec, weights, biases)
                    .map_err(|e| malformed(KIND, e.to_string()))?,
            );
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(malformed(KIND, format!("unexpected tensor {extra}")));
        }
        let bundle = Self { dims, nets };
        if !bundle.is_finite() {
            return Err(malformed(KIND, "non-finite parameter"));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = codec::create(path)?;
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush().map_err(codec::io_err(path)))
            .map_err(|e| codec::at_path(e, "checkpoint", path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = codec::open(path)?;
        Self::read_checkpoint(&mut r).map_err(|e| codec::at_path(e, "checkpoint", path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims(k: usize) -> NetworkDims {
        NetworkDims {
            image_dim: 6,
            text_dim: 5,
            text_embed_dim: 4,
            code_bits: k,
        }
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::new(rows, cols, v).unwrap()
    }

    fn zero_bundle(dims: NetworkDims) -> NetworkBundle {
        let mut b = NetworkBundle::init(dims, 0).unwrap();
        for kind in NetKind::ALL {
            let layers = b.net(kind).spec().layers();
            for l in 0..layers {
                let w = b.net_mut(kind).weight_mut(l);
                *w = Matrix::zeros(w.rows(), w.cols());
            }
        }
        b
    }

    fn act(a: Activation, x: f64) -> f64 {
        match a {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Layer-by-layer scalar recomputation returning (output, tap).
    fn scalar_forward(net: &Mlp, x: &Matrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let spec = net.spec();
        let mut outs = Vec::new();
        let mut taps = Vec::new();
        for r in 0..x.rows() {
            let mut h: Vec<f64> = x.row(r).to_vec();
            let mut tap = Vec::new();
            for l in 0..spec.layers() {
                let w = net.weight(l);
                let b = net.bias(l);
                let width_index = l + 1;
                let a = if width_index == spec.widths.len() - 1 {
                    spec.output
                } else if spec.tap.map(|t| t.layer) == Some(width_index) {
                    spec.tap.unwrap().activation
                } else {
                    spec.hidden
                };
                h = (0..w.cols())
                    .map(|j| {
                        let acc = h
                            .iter()
                            .enumerate()
                            .fold(b.get(0, j), |acc, (i, x)| acc + x * w.get(i, j));
                        act(a, acc)
                    })
                    .collect();
                if spec.tap.map(|t| t.layer) == Some(width_index) {
                    tap = h.clone();
                }
            }
            outs.push(h);
            taps.push(tap);
        }
        (outs, taps)
    }

    fn assert_close(graph: &Matrix, oracle: &[Vec<f64>]) {
        assert_eq!(graph.rows(), oracle.len());
        for (r, row) in oracle.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!(
                    (graph.get(r, c) - v).abs() < 1e-10,
                    "({r},{c}) {} vs {v}",
                    graph.get(r, c)
                );
            }
        }
    }

    #[test]
    fn spec_validation() {
        let bad = MlpSpec {
            widths: vec![3],
            hidden: Activation::Relu,
            output: Activation::Identity,
            tap: None,
        };
        assert!(bad.validate().is_err());
        let tap_on_output = MlpSpec {
            widths: vec![3, 4, 5],
            hidden: Activation::Relu,
            output: Activation::Identity,
            tap: Some(Tap {
                layer: 2,
                activation: Activation::Tanh,
            }),
        };
        assert!(tap_on_output.validate().is_err());
    }

    #[test]
    fn widths_follow_the_architecture() {
        let d = NetworkDims::standard(1386, 32);
        assert_eq!(
            d.spec(NetKind::OuterGenImageToText).widths,
            vec![4096, 512, 256, 512, 300]
        );
        assert_eq!(
            d.spec(NetKind::OuterGenTextToImage).widths,
            vec![300, 512, 256, 512, 4096]
        );
        assert_eq!(
            d.spec(NetKind::InnerGenImageToText).widths,
            vec![256, 128, 32, 128, 256]
        );
        assert_eq!(
            d.spec(NetKind::OuterDiscImage).widths,
            vec![4096, 256, 32, 1]
        );
        assert_eq!(d.spec(NetKind::OuterDiscText).widths, vec![300, 256, 32, 1]);
        assert_eq!(d.spec(NetKind::InnerDiscText).widths, vec![256, 128, 32, 1]);
        assert!(NetworkDims::standard(10, 12).validate().is_err());
    }

    #[test]
    fn encode_image_is_identity_and_checks_width() {
        let b = NetworkBundle::init(small_dims(8), 1).unwrap();
        let mut g = Graph::new();
        let x = random_input(3, 6, 2);
        let v = g.constant(x.clone());
        let out = b.encode_image(&g, v).unwrap();
        assert_eq!(g.value(out), &x);
        let z = g.constant(Matrix::zeros(2, 6));
        assert_eq!(
            g.value(b.encode_image(&g, z).unwrap()),
            &Matrix::zeros(2, 6)
        );
        let wide = g.constant(Matrix::zeros(2, 7));
        assert!(matches!(b.encode_image(&g, wide), Err(Error::Shape { .. })));
    }

    #[test]
    fn encode_text_zero_and_one_hot() {
        let dims = small_dims(8);
        let b = zero_bundle(dims);
        let mut g = Graph::new();
        let x = g.constant(random_input(2, 5, 3));
        let out = b.encode_text(&mut g, x, false).unwrap();
        assert_eq!(g.value(out), &Matrix::zeros(2, 4));

        let mut b = NetworkBundle::init(dims, 4).unwrap();
        *b.net_mut(NetKind::TextEncoder).bias_mut(0) =
            Matrix::from_rows(&[[0.5, -0.25, 0.125, 1.0]]);
        let mut one_hot = Matrix::zeros(1, 5);
        one_hot.set(0, 3, 1.0);
        let x = g.constant(one_hot);
        let out = b.encode_text(&mut g, x, false).unwrap();
        let w = b.net(NetKind::TextEncoder).weight(0);
        let bias = b.net(NetKind::TextEncoder).bias(0);
        for c in 0..4 {
            assert_eq!(g.value(out).get(0, c), w.get(3, c) + bias.get(0, c));
        }
        let bad = g.constant(Matrix::zeros(1, 6));
        assert!(b.encode_text(&mut g, bad, false).is_err());
    }

    #[test]
    fn generators_match_scalar_oracle_and_shapes() {
        for k in [16, 32, 64] {
            let dims = small_dims(k);
            let b = NetworkBundle::init(dims, 11).unwrap();
            let mut g = Graph::new();
            let img = random_input(3, 6, 5);
            let v = g.constant(img.clone());
            let (f_fake, z) = b
                .gen_outer(&mut g, Direction::ImageToText, v, false)
                .unwrap();
            assert_eq!(g.shape(f_fake), (3, 4));
            assert_eq!(g.shape(z), (3, COMMON_DIM));
            let (outs, taps) = scalar_forward(b.net(NetKind::OuterGenImageToText), &img);
            assert_close(g.value(f_fake), &outs);
            assert_close(g.value(z), &taps);

            let (back, _) = b
                .gen_outer(&mut g, Direction::TextToImage, f_fake, false)
                .unwrap();
            assert_eq!(g.shape(back), (3, 6));

            let (z_fake, h) = b
                .gen_inner(&mut g, Direction::ImageToText, z, false)
                .unwrap();
            assert_eq!(g.shape(z_fake), (3, COMMON_DIM));
            assert_eq!(g.shape(h), (3, k));
            assert!(g.value(h).as_slice().iter().all(|v| v.abs() < 1.0));
            let (outs, taps) = scalar_forward(b.net(NetKind::InnerGenImageToText), g.value(z));
            assert_close(g.value(z_fake), &outs);
            assert_close(g.value(h), &taps);
            let (z_back, _) = b
                .gen_inner(&mut g, Direction::TextToImage, z_fake, false)
                .unwrap();
            assert_eq!(g.shape(z_back), (3, COMMON_DIM));
        }
    }

    #[test]
    fn zero_parameters_give_zero_outputs_and_half_probabilities() {
        let dims = small_dims(16);
        let b = zero_bundle(dims);
        let mut g = Graph::new();
        let img = g.constant(random_input(4, 6, 9));
        let (f, z) = b
            .gen_outer(&mut g, Direction::ImageToText, img, false)
            .unwrap();
        assert!(g.value(f).as_slice().iter().all(|&v| v == 0.0));
        let (_, h) = b
            .gen_inner(&mut g, Direction::ImageToText, z, false)
            .unwrap();
        assert!(g.value(h).as_slice().iter().all(|&v| v == 0.0));
        for (critic, width) in [
            (Critic::FeatureImage, 6),
            (Critic::FeatureText, 4),
            (Critic::CommonImage, COMMON_DIM),
            (Critic::CommonText, COMMON_DIM),
        ] {
            let x = g.constant(random_input(4, width, 1));
            let p = b.discriminate(&mut g, critic, x, false).unwrap();
            assert_eq!(g.shape(p), (4, 1));
            assert!(g.value(p).as_slice().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn discriminator_matches_oracle_and_stays_in_open_interval() {
        let b = NetworkBundle::init(small_dims(8), 21).unwrap();
        let mut g = Graph::new();
        let x = random_input(5, 6, 22);
        let v = g.constant(x.clone());
        let p = b
            .discriminate(&mut g, Critic::FeatureImage, v, false)
            .unwrap();
        let (outs, _) = scalar_forward(b.net(NetKind::OuterDiscImage), &x);
        assert_close(g.value(p), &outs);
        assert!(g.value(p).as_slice().iter().all(|&v| v > 0.0 && v < 1.0));

        let mut big = b.clone();
        *big.net_mut(NetKind::OuterDiscImage).bias_mut(2) = Matrix::scalar(1e3);
        let v = g.constant(x);
        let p = big
            .discriminate(&mut g, Critic::FeatureImage, v, false)
            .unwrap();
        assert!(g.value(p).as_slice().iter().all(|&v| v == 1.0 - PROB_EPS));
        let bad = g.constant(Matrix::zeros(1, 7));
        assert!(b
            .discriminate(&mut g, Critic::FeatureImage, bad, false)
            .is_err());
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let a = NetworkBundle::init(small_dims(16), 5).unwrap();
        let b = NetworkBundle::init(small_dims(16), 5).unwrap();
        let c = NetworkBundle::init(small_dims(16), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (_, _, m) in a.tensors() {
            assert!(m.as_slice().iter().all(|&v| v as f32 as f64 == v));
        }
        let w = a.net(NetKind::OuterGenImageToText).weight(1);
        let bound = 1.0 / (512f64).sqrt();
        assert!(w.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let a = NetworkBundle::init(small_dims(32), 8).unwrap();
        let mut bytes = Vec::new();
        a.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"UCHCKPT1");
        let b = NetworkBundle::read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(a, b);
        let mut again = Vec::new();
        b.write_checkpoint(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn checkpoint_rejects_truncation_and_bad_magic() {
        let a = NetworkBundle::init(small_dims(8), 8).unwrap();
        let mut bytes = Vec::new();
        a.write_checkpoint(&mut bytes).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            NetworkBundle::read_checkpoint(&mut &cut[..]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(NetworkBundle::read_checkpoint(&mut bad.as_slice()).is_err());
        let only_magic = &bytes[..8];
        assert!(NetworkBundle::read_checkpoint(&mut &only_magic[..]).is_err());
    }

    #[test]
    fn param_keys_round_trip() {
        for kind in NetKind::ALL {
            for layer in 0..4 {
                for bias in [false, true] {
                    let key = kind.param_key(layer, bias);
                    assert_eq!(NetKind::from_param_key(key), Some((kind, layer, bias)));
                }
            }
        }
        assert_eq!(NetKind::OuterDiscImage.modality(), Modality::Image);
        assert_eq!(NetKind::TextEncoder.modality(), Modality::Text);
        assert_eq!(NetKind::InnerGenImageToText.modality(), Modality::Text);
    }
}
