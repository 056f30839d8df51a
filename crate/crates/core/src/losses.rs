//! Adversarial, cycle-reconstruction and similarity terms for both cycles.
//!
//! All terms are batch means. Discriminator probabilities arrive already
//! clamped to `[eps, 1 - eps]`, so every log is finite.

use crate::error::{Error, Result};
use crate::ndcore::{Graph, Matrix, Var};
use crate::networks::{Critic, Direction, NetKind, NetSet, NetworkBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvSide {
    /// `mean log D(real) + mean log(1 - D(fake))`, to be maximised.
    Discriminator,
    /// Non-saturating `mean -log D(fake)`, to be minimised.
    Generator,
}

pub fn adv_loss(g: &mut Graph, d_real: Var, d_fake: Var, side: AdvSide) -> Result<Var> {
    if g.value(d_fake).is_empty() || (side == AdvSide::Discriminator && g.value(d_real).is_empty())
    {
        return Err(Error::contract("adversarial loss on an empty batch"));
    }
    match side {
        AdvSide::Discriminator => {
            let log_real = g.log(d_real)?;
            let real = g.mean(log_real)?;
            let neg = g.scale(d_fake, -1.0);
            let one_minus = g.add_scalar(neg, 1.0);
            let log_fake = g.log(one_minus)?;
            let fake = g.mean(log_fake)?;
            g.add(real, fake)
        }
        AdvSide::Generator => {
            let log_fake = g.log(d_fake)?;
            let mean = g.mean(log_fake)?;
            Ok(g.scale(mean, -1.0))
        }
    }
}

fn batch_sq_dist(g: &mut Graph, op: &'static str, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape {
            op,
            left: sa,
            right: sb,
        });
    }
    if sa.0 == 0 {
        return Err(Error::contract(format!("{op} on an empty batch")));
    }
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / sa.0 as f64))
}

/// Batch mean of the per-item squared distance between `a` and `b`.
pub fn similarity_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    batch_sq_dist(g, "similarity_loss", a, b)
}

/// Both cycle directions, each a batch mean of squared reconstruction error.
pub fn cycle_reconstruction_loss(
    g: &mut Graph,
    real_a: Var,
    regen_a: Var,
    real_b: Var,
    regen_b: Var,
) -> Result<Var> {
    let a = batch_sq_dist(g, "cycle_reconstruction_loss", real_a, regen_a)?;
    let b = batch_sq_dist(g, "cycle_reconstruction_loss", real_b, regen_b)?;
    g.add(a, b)
}

/// Multipliers on the three kinds of term; all 1.0 by default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub adversarial: f64,
    pub reconstruction: f64,
    pub similarity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            reconstruction: 1.0,
            similarity: 1.0,
        }
    }
}

/// Scalar values of every term for one batch. Adversarial fields hold the
/// generator-side value, so `l_f = adv_f_image + adv_f_text + rec_f + sim_f`
/// under unit weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub adv_f_image: f64,
    pub adv_f_text: f64,
    pub rec_f: f64,
    pub sim_f: f64,
    pub adv_z_image: f64,
    pub adv_z_text: f64,
    pub rec_z: f64,
    pub sim_z: f64,
    pub l_f: f64,
    pub l_z: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "iter,adv_f_I,adv_f_T,rec_f,sim_f,adv_z_I,adv_z_T,rec_z,sim_z,L_f,L_z,L_total";

    /// Fills the three totals from the component fields.
    pub fn with_totals(mut self, w: &LossWeights) -> Self {
        self.l_f = w.adversarial * (self.adv_f_image + self.adv_f_text)
            + w.reconstruction * self.rec_f
            + w.similarity * self.sim_f;
        self.l_z = w.adversarial * (self.adv_z_image + self.adv_z_text)
            + w.reconstruction * self.rec_z
            + w.similarity * self.sim_z;
        self.l_total = self.l_f + self.l_z;
        self
    }

    pub fn fields(&self) -> [(&'static str, f64); 11] {
        [
            ("adv_f_I", self.adv_f_image),
            ("adv_f_T", self.adv_f_text),
            ("rec_f", self.rec_f),
            ("sim_f", self.sim_f),
            ("adv_z_I", self.adv_z_image),
            ("adv_z_T", self.adv_z_text),
            ("rec_z", self.rec_z),
            ("sim_z", self.sim_z),
            ("L_f", self.l_f),
            ("L_z", self.l_z),
            ("L_total", self.l_total),
        ]
    }

    pub fn csv_row(&self, iter: usize) -> String {
        let mut row = iter.to_string();
        for (_, v) in self.fields() {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }

    /// First non-finite field, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.fields()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Outer-cycle forward values for one batch.
#[derive(Clone, Copy, Debug)]
pub struct OuterForward {
    pub f_image_real: Var,
    pub f_text_real: Var,
    pub f_text_fake: Var,
    pub f_image_fake: Var,
    pub z_image: Var,
    pub z_text: Var,
    /// `G_t2i(G_i2t(F_image))`.
    pub f_image_cycle: Var,
    /// `G_i2t(G_t2i(F_text))`.
    pub f_text_cycle: Var,
}

pub fn forward_outer(
    g: &mut Graph,
    bundle: &NetworkBundle,
    images: Var,
    texts: Var,
    trainable: NetSet,
) -> Result<OuterForward> {
    let (ni, nt) = (g.shape(images).0, g.shape(texts).0);
    if ni != nt {
        return Err(Error::Shape {
            op: "paired batch",
            left: g.shape(images),
            right: g.shape(texts),
        });
    }
    let f_image_real = bundle.encode_image(g, images)?;
    let f_text_real = bundle.encode_text(g, texts, trainable.contains(NetKind::TextEncoder))?;
    forward_outer_from(g, bundle, f_image_real, f_text_real, trainable)
}

/// [`forward_outer`] starting from already-encoded features.
pub fn forward_outer_from(
    g: &mut Graph,
    bundle: &NetworkBundle,
    f_image_real: Var,
    f_text_real: Var,
    trainable: NetSet,
) -> Result<OuterForward> {
    let i2t = trainable.contains(NetKind::OuterGenImageToText);
    let t2i = trainable.contains(NetKind::OuterGenTextToImage);
    let (f_text_fake, z_image) = bundle.gen_outer(g, Direction::ImageToText, f_image_real, i2t)?;
    let (f_image_fake, z_text) = bundle.gen_outer(g, Direction::TextToImage, f_text_real, t2i)?;
    let (f_image_cycle, _) = bundle.gen_outer(g, Direction::TextToImage, f_text_fake, t2i)?;
    let (f_text_cycle, _) = bundle.gen_outer(g, Direction::ImageToText, f_image_fake, i2t)?;
    Ok(OuterForward {
        f_image_real,
        f_text_real,
        f_text_fake,
        f_image_fake,
        z_image,
        z_text,
        f_image_cycle,
        f_text_cycle,
    })
}

/// Inner-cycle forward values given the two common representations.
#[derive(Clone, Copy, Debug)]
pub struct InnerForward {
    pub z_image: Var,
    pub z_text: Var,
    pub z_text_fake: Var,
    pub z_image_fake: Var,
    pub h_image: Var,
    pub h_text: Var,
    pub z_image_cycle: Var,
    pub z_text_cycle: Var,
}

pub fn forward_inner(
    g: &mut Graph,
    bundle: &NetworkBundle,
    z_image: Var,
    z_text: Var,
    trainable: NetSet,
) -> Result<InnerForward> {
    let i2t = trainable.contains(NetKind::InnerGenImageToText);
    let t2i = trainable.contains(NetKind::InnerGenTextToImage);
    let (z_text_fake, h_image) = bundle.gen_inner(g, Direction::ImageToText, z_image, i2t)?;
    let (z_image_fake, h_text) = bundle.gen_inner(g, Direction::TextToImage, z_text, t2i)?;
    let (z_image_cycle, _) = bundle.gen_inner(g, Direction::TextToImage, z_text_fake, t2i)?;
    let (z_text_cycle, _) = bundle.gen_inner(g, Direction::ImageToText, z_image_fake, i2t)?;
    Ok(InnerForward {
        z_image,
        z_text,
        z_text_fake,
        z_image_fake,
        h_image,
        h_text,
        z_image_cycle,
        z_text_cycle,
    })
}

/// Loss terms of one cycle as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct CycleTerms {
    /// Discriminator-side adversarial value, image critic.
    pub disc_image: Var,
    /// Discriminator-side adversarial value, text critic.
    pub disc_text: Var,
    /// Generator-side adversarial value, image critic.
    pub gen_image: Var,
    /// Generator-side adversarial value, text critic.
    pub gen_text: Var,
    pub rec: Var,
    pub sim: Var,
}

/// Discriminator-side and generator-side values for one critic.
pub fn adversarial_pair(
    g: &mut Graph,
    bundle: &NetworkBundle,
    critic: Critic,
    real: Var,
    fake: Var,
    trainable: NetSet,
) -> Result<(Var, Var)> {
    let t = trainable.contains(critic.net());
    let d_real = bundle.discriminate(g, critic, real, t)?;
    let d_fake = bundle.discriminate(g, critic, fake, t)?;
    Ok((
        adv_loss(g, d_real, d_fake, AdvSide::Discriminator)?,
        adv_loss(g, d_real, d_fake, AdvSide::Generator)?,
    ))
}

pub fn outer_terms(
    g: &mut Graph,
    bundle: &NetworkBundle,
    f: &OuterForward,
    trainable: NetSet,
) -> Result<CycleTerms> {
    let (disc_image, gen_image) = adversarial_pair(
        g,
        bundle,
        Critic::FeatureImage,
        f.f_image_real,
        f.f_image_fake,
        trainable,
    )?;
    let (disc_text, gen_text) = adversarial_pair(
        g,
        bundle,
        Critic::FeatureText,
        f.f_text_real,
        f.f_text_fake,
        trainable,
    )?;
    let rec = cycle_reconstruction_loss(
        g,
        f.f_image_real,
        f.f_image_cycle,
        f.f_text_real,
        f.f_text_cycle,
    )?;
    let sim = similarity_loss(g, f.z_image, f.z_text)?;
    Ok(CycleTerms {
        disc_image,
        disc_text,
        gen_image,
        gen_text,
        rec,
        sim,
    })
}

pub fn inner_terms(
    g: &mut Graph,
    bundle: &NetworkBundle,
    f: &InnerForward,
    trainable: NetSet,
) -> Result<CycleTerms> {
    let (disc_image, gen_image) = adversarial_pair(
        g,
        bundle,
        Critic::CommonImage,
        f.z_image,
        f.z_image_fake,
        trainable,
    )?;
    let (disc_text, gen_text) = adversarial_pair(
        g,
        bundle,
        Critic::CommonText,
        f.z_text,
        f.z_text_fake,
        trainable,
    )?;
    let rec = cycle_reconstruction_loss(g, f.z_image, f.z_image_cycle, f.z_text, f.z_text_cycle)?;
    let sim = similarity_loss(g, f.h_image, f.h_text)?;
    Ok(CycleTerms {
        disc_image,
        disc_text,
        gen_image,
        gen_text,
        rec,
        sim,
    })
}

/// `w_adv * (gen_image + gen_text) + w_rec * rec + w_sim * sim`.
pub fn cycle_total(g: &mut Graph, t: &CycleTerms, w: &LossWeights) -> Result<Var> {
    let adv = g.add(t.gen_image, t.gen_text)?;
    let adv = g.scale(adv, w.adversarial);
    let rec = g.scale(t.rec, w.reconstruction);
    let sim = g.scale(t.sim, w.similarity);
    let rs = g.add(rec, sim)?;
    g.add(adv, rs)
}

/// Full graph of every term for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub outer_fwd: OuterForward,
    pub inner_fwd: InnerForward,
    pub outer: CycleTerms,
    pub inner: CycleTerms,
    pub l_f: Var,
    pub l_z: Var,
    pub l_total: Var,
}

impl LossGraph {
    pub fn build(
        g: &mut Graph,
        bundle: &NetworkBundle,
        images: &Matrix,
        texts: &Matrix,
        weights: &LossWeights,
        trainable: NetSet,
    ) -> Result<Self> {
        let iv = g.constant(images.clone());
        let tv = g.constant(texts.clone());
        let outer_fwd = forward_outer(g, bundle, iv, tv, trainable)?;
        let inner_fwd = forward_inner(g, bundle, outer_fwd.z_image, outer_fwd.z_text, trainable)?;
        let outer = outer_terms(g, bundle, &outer_fwd, trainable)?;
        let inner = inner_terms(g, bundle, &inner_fwd, trainable)?;
        let l_f = cycle_total(g, &outer, weights)?;
        let l_z = cycle_total(g, &inner, weights)?;
        let l_total = g.add(l_f, l_z)?;
        Ok(Self {
            outer_fwd,
            inner_fwd,
            outer,
            inner,
            l_f,
            l_z,
            l_total,
        })
    }

    pub fn breakdown(&self, g: &Graph, weights: &LossWeights) -> LossBreakdown {
        let v = |x: Var| g.value(x).as_slice()[0];
        LossBreakdown {
            adv_f_image: v(self.outer.gen_image),
            adv_f_text: v(self.outer.gen_text),
            rec_f: v(self.outer.rec),
            sim_f: v(self.outer.sim),
            adv_z_image: v(self.inner.gen_image),
            adv_z_text: v(self.inner.gen_text),
            rec_z: v(self.inner.rec),
            sim_z: v(self.inner.sim),
            ..Default::default()
        }
        .with_totals(weights)
    }
}

/// Every loss term for one aligned batch at the bundle's current parameters.
pub fn total_losses(
    bundle: &NetworkBundle,
    images: &Matrix,
    texts: &Matrix,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let lg = LossGraph::build(&mut g, bundle, images, texts, weights, NetSet::NONE)?;
    Ok(lg.breakdown(&g, weights))
}
