//! Residual 3D U-Net backbone with region-conditioned bottleneck modulation
//! and FiLM adapter slots on the skip paths.
//!
//! The encoder keeps the time axis intact and halves the spatial axes once
//! per level; the head collapses the input frames and maps channels to
//! lead-time frames, so `[11][4][H][W]` becomes `[1][T_out][H][W]` after a
//! sigmoid. Skip tensors pass through an orthogonally-regularized 1×1×1
//! convolution and then a FiLM affine before joining the decoder.

pub mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;

use ndarray::{Array1, Array4, ArrayD, ArrayView5, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::region_one_hot;
use crate::error::CoreError;
use crate::Result;
use layers::{
    dropout_mask, relu_vec, sigmoid, Conv3, Linear, MaxPool2, PoolCache, ResidualUnit, UnitCache,
    UpConv2,
};

/// Structural configuration of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Number of spatial downsampling levels.
    pub levels: usize,
    /// Channels after the stem; doubled per level.
    pub base_channels: usize,
    pub in_channels: usize,
    pub in_frames: usize,
    /// Lead-time frames produced by the head.
    pub out_frames: usize,
    pub dropout_rate: f32,
    /// Informational output/input resolution ratio; not used structurally.
    pub super_resolution: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            levels: 3,
            base_channels: 32,
            in_channels: 11,
            in_frames: 4,
            out_frames: 32,
            dropout_rate: 0.4,
            super_resolution: 6,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(CoreError::invalid("levels must be >= 1"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(CoreError::invalid("channel counts must be >= 1"));
        }
        if self.in_frames == 0 || self.out_frames == 0 {
            return Err(CoreError::invalid("frame counts must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoreError::invalid(format!(
                "dropout_rate must lie in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Channels of the encoder output at `level` (0 = stem).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels of the bottleneck representation.
    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.levels
    }
}

/// Region/year identity with its one-hot encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTag {
    pub region_id: u32,
    pub year: i32,
    pub one_hot: Array1<f32>,
}

impl RegionTag {
    pub fn new(region_id: u32, year: i32, num_regions: usize) -> Result<Self> {
        Ok(RegionTag {
            region_id,
            year,
            one_hot: region_one_hot(region_id, num_regions)?,
        })
    }
}

/// Per-channel affine FiLM parameters for one skip level.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmPair {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
}

impl FilmPair {
    pub fn identity(channels: usize) -> Self {
        FilmPair {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gamma.iter().all(|v| v.to_bits() == 1.0f32.to_bits())
            && self.beta.iter().all(|v| v.to_bits() == 0.0f32.to_bits())
    }
}

/// FiLM adapter parameters for one (region, year) pair: one `(γ_f, β_f)`
/// per skip level.
#[derive(Debug, Clone, PartialEq)]
pub struct FiLMAdapterSet {
    pub region_id: u32,
    pub year: i32,
    pub levels: Vec<FilmPair>,
}

impl FiLMAdapterSet {
    /// Identity-initialized adapters for the given backbone shape.
    pub fn identity(config: &BackboneConfig, region_id: u32, year: i32) -> Self {
        FiLMAdapterSet {
            region_id,
            year,
            levels: (0..config.levels)
                .map(|l| FilmPair::identity(config.channels_at(l)))
                .collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.levels.iter().all(FilmPair::is_identity)
    }

    pub fn parameter_count(&self) -> usize {
        self.levels
            .iter()
            .map(|p| p.gamma.len() + p.beta.len())
            .sum()
    }
}

/// FiLM/RCN channel modulation: `out[c,·] = γ[c]·x[c,·] + β[c]`.
///
/// The exact-identity case (`γ = 1`, `β = 0` bitwise) returns the input
/// unchanged, which pins down the identity-adapter contract.
pub fn apply_modulation(
    x: &Array4<f32>,
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
) -> Result<Array4<f32>> {
    let c = x.dim().0;
    if gamma.len() != c || beta.len() != c {
        return Err(CoreError::invalid(format!(
            "modulation length mismatch: x has {c} channels, gamma {} beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    if gamma.iter().all(|v| v.to_bits() == 1.0f32.to_bits())
        && beta.iter().all(|v| v.to_bits() == 0.0f32.to_bits())
    {
        return Ok(x.clone());
    }
    let mut y = x.clone();
    for (ci, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
        let (g, b) = (gamma[ci], beta[ci]);
        plane.mapv_inplace(|v| g * v + b);
    }
    Ok(y)
}

/// Two-layer region conditioner: one-hot → hidden (ReLU) → `(Δγ, β)` with a
/// zero-initialized head, so conditioning starts as an exact no-op.
#[derive(Debug, Clone)]
pub struct RegionConditioner {
    pub fc1: Linear,
    pub fc2: Linear,
    bottleneck_channels: usize,
}

#[derive(Debug, Clone)]
pub struct RcnCache {
    one_hot: Array1<f32>,
    hidden: Array1<f32>,
}

impl RegionConditioner {
    fn new(num_regions: usize, bottleneck_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = 4 * num_regions;
        RegionConditioner {
            fc1: Linear::new(num_regions, hidden, rng),
            fc2: Linear::zeros(hidden, 2 * bottleneck_channels),
            bottleneck_channels,
        }
    }

    /// Produces the `(γ, β)` modulation vectors for a one-hot region input.
    pub fn forward(&self, one_hot: &Array1<f32>) -> Result<(Array1<f32>, Array1<f32>)> {
        let (gamma, beta, _) = self.forward_cached(one_hot)?;
        Ok((gamma, beta))
    }

    fn forward_cached(
        &self,
        one_hot: &Array1<f32>,
    ) -> Result<(Array1<f32>, Array1<f32>, RcnCache)> {
        if one_hot.len() != self.fc1.w.dim().1 {
            return Err(CoreError::invalid(format!(
                "one-hot length {} does not match conditioner input {}",
                one_hot.len(),
                self.fc1.w.dim().1
            )));
        }
        let hidden = relu_vec(self.fc1.forward(one_hot));
        let out = self.fc2.forward(&hidden);
        let c = self.bottleneck_channels;
        let gamma = Array1::from_iter(out.iter().take(c).map(|d| 1.0 + d));
        let beta = Array1::from_iter(out.iter().skip(c).copied());
        Ok((
            gamma,
            beta,
            RcnCache {
                one_hot: one_hot.clone(),
                hidden,
            },
        ))
    }
}

/// Named gradient accumulator keyed by parameter path.
#[derive(Debug, Default, Clone)]
pub struct Grads {
    pub map: BTreeMap<String, ArrayD<f32>>,
}

impl Grads {
    pub fn accumulate(&mut self, name: &str, g: ArrayD<f32>) {
        match self.map.get_mut(name) {
            Some(t) => *t += &g,
            None => {
                self.map.insert(name.to_string(), g);
            }
        }
    }

    pub fn merge(&mut self, other: Grads) {
        for (k, v) in other.map {
            self.accumulate(&k, v);
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.map.get(name)
    }
}

/// Which parameters a backward pass accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardScope {
    /// All backbone and conditioner parameters.
    Full,
    /// Only the FiLM adapter parameters; encoder, conditioner, and decoder
    /// stay frozen and the pass stops once every adapter grad is collected.
    AdaptersOnly,
}

/// Everything the backward pass needs from one training forward.
pub struct ForwardCache {
    enc: Vec<UnitCache>,
    enc_out: Vec<Array4<f32>>,
    drop_masks: Vec<Option<Array4<f32>>>,
    pools: Vec<PoolCache>,
    rcn: RcnCache,
    mod_gamma: Array1<f32>,
    skip_pre_film: Vec<Array4<f32>>,
    film_gamma: Vec<Array1<f32>>,
    up_in: Vec<Array4<f32>>,
    dec: Vec<UnitCache>,
    head_in: Array4<f32>,
    /// Sigmoid outputs `[1][T_out][H][W]`.
    pub probs: Array4<f32>,
}

/// The backbone network. A frozen backbone is immutable and safe to share;
/// training mutates parameters through [`Backbone::visit_params_mut`].
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub num_regions: usize,
    pub seed: u64,
    enc: Vec<ResidualUnit>,
    skip_convs: Vec<Conv3>,
    rcn: RegionConditioner,
    ups: Vec<UpConv2>,
    dec: Vec<ResidualUnit>,
    head: Conv3,
}

/// Deterministically builds a backbone from a config, region count, and seed.
pub fn build_backbone(config: &BackboneConfig, num_regions: usize, seed: u64) -> Result<Backbone> {
    Backbone::build(config, num_regions, seed)
}

impl Backbone {
    pub fn build(config: &BackboneConfig, num_regions: usize, seed: u64) -> Result<Backbone> {
        config.validate()?;
        if num_regions == 0 {
            return Err(CoreError::invalid("num_regions must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = config.clone();

        let mut enc = Vec::with_capacity(cfg.levels + 1);
        enc.push(ResidualUnit::new(cfg.in_channels, cfg.channels_at(0), &mut rng));
        for l in 1..=cfg.levels {
            enc.push(ResidualUnit::new(cfg.channels_at(l - 1), cfg.channels_at(l), &mut rng));
        }
        let skip_convs = (0..cfg.levels)
            .map(|l| {
                let c = cfg.channels_at(l);
                Conv3::new(c, c, (1, 1, 1), (0, 0, 0), &mut rng)
            })
            .collect();
        let rcn = RegionConditioner::new(num_regions, cfg.bottleneck_channels(), &mut rng);
        let ups = (0..cfg.levels)
            .map(|l| UpConv2::new(cfg.channels_at(l + 1), cfg.channels_at(l), &mut rng))
            .collect();
        let dec = (0..cfg.levels)
            .map(|l| ResidualUnit::new(2 * cfg.channels_at(l), cfg.channels_at(l), &mut rng))
            .collect();
        let head = Conv3::new(
            cfg.channels_at(0),
            cfg.out_frames,
            (cfg.in_frames, 1, 1),
            (0, 0, 0),
            &mut rng,
        );

        Ok(Backbone {
            config: cfg,
            num_regions,
            seed,
            enc,
            skip_convs,
            rcn,
            ups,
            dec,
            head,
        })
    }

    pub fn conditioner(&self) -> &RegionConditioner {
        &self.rcn
    }

    fn check_input(&self, x: &Array4<f32>, tag: &RegionTag) -> Result<()> {
        let (c, t, h, w) = x.dim();
        let cfg = &self.config;
        if c != cfg.in_channels || t != cfg.in_frames {
            return Err(CoreError::invalid(format!(
                "input shape [{c}][{t}][{h}][{w}] does not match config [{}][{}][H][W]",
                cfg.in_channels, cfg.in_frames
            )));
        }
        let div = 1usize << cfg.levels;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(CoreError::invalid(format!(
                "spatial dims {h}x{w} must be positive multiples of {div}"
            )));
        }
        if tag.one_hot.len() != self.num_regions {
            return Err(CoreError::invalid(format!(
                "tag one-hot length {} does not match {} regions",
                tag.one_hot.len(),
                self.num_regions
            )));
        }
        Ok(())
    }

    fn check_adapters(&self, tag: &RegionTag, adapters: &FiLMAdapterSet) -> Result<()> {
        if adapters.region_id != tag.region_id || adapters.year != tag.year {
            return Err(CoreError::invalid(format!(
                "adapter key ({}, {}) does not match tag ({}, {})",
                adapters.region_id, adapters.year, tag.region_id, tag.year
            )));
        }
        if adapters.levels.len() != self.config.levels {
            return Err(CoreError::invalid(format!(
                "adapter set has {} levels, backbone has {}",
                adapters.levels.len(),
                self.config.levels
            )));
        }
        for (l, pair) in adapters.levels.iter().enumerate() {
            let c = self.config.channels_at(l);
            if pair.gamma.len() != c || pair.beta.len() != c {
                return Err(CoreError::invalid(format!(
                    "adapter level {l} has {} channels, skip path has {c}",
                    pair.gamma.len()
                )));
            }
        }
        Ok(())
    }

    /// Inference forward: probabilities `[1][T_out][H][W]`, dropout off.
    pub fn forward(
        &self,
        x: &Array4<f32>,
        tag: &RegionTag,
        adapters: Option<&FiLMAdapterSet>,
    ) -> Result<Array4<f32>> {
        let (probs, _) = self.forward_train(x, tag, adapters, None)?;
        Ok(probs)
    }

    /// Training forward: dropout is applied when an RNG is supplied, and the
    /// full activation cache is returned for [`Backbone::backward`].
    pub fn forward_train(
        &self,
        x: &Array4<f32>,
        tag: &RegionTag,
        adapters: Option<&FiLMAdapterSet>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array4<f32>, ForwardCache)> {
        self.check_input(x, tag)?;
        if let Some(a) = adapters {
            self.check_adapters(tag, a)?;
        }
        let levels = self.config.levels;

        // Encoder.
        let mut enc_caches = Vec::with_capacity(levels + 1);
        let mut enc_out = Vec::with_capacity(levels + 1);
        let mut drop_masks = Vec::with_capacity(levels + 1);
        let mut pools = Vec::with_capacity(levels);
        let mut cur = x.clone();
        for l in 0..=levels {
            if l > 0 {
                let (pooled, arg) = MaxPool2::forward(&cur);
                pools.push(arg);
                cur = pooled;
            }
            let (mut out, cache) = self.enc[l].forward_cached(&cur);
            enc_caches.push(cache);
            let mask = match (&mut dropout_rng, self.config.dropout_rate > 0.0) {
                (Some(rng), true) => {
                    let mask = dropout_mask(out.dim(), self.config.dropout_rate, rng);
                    out *= &mask;
                    Some(mask)
                }
                _ => None,
            };
            drop_masks.push(mask);
            enc_out.push(out.clone());
            cur = out;
        }

        // Region-conditioned modulation at the bottleneck.
        let (gamma, beta, rcn_cache) = self.rcn.forward_cached(&tag.one_hot)?;
        let mut d = apply_modulation(&enc_out[levels], &gamma, &beta)?;

        // Decoder with FiLM-modulated orthogonal skip paths.
        let mut up_in: Vec<Option<Array4<f32>>> = (0..levels).map(|_| None).collect();
        let mut dec_caches: Vec<Option<UnitCache>> = (0..levels).map(|_| None).collect();
        let mut skip_pre_film: Vec<Option<Array4<f32>>> = (0..levels).map(|_| None).collect();
        let mut film_gamma: Vec<Option<Array1<f32>>> = (0..levels).map(|_| None).collect();
        for l in (0..levels).rev() {
            up_in[l] = Some(d.clone());
            let u = self.ups[l].forward(&d);
            let s = self.skip_convs[l].forward(&enc_out[l]);
            let (g, b) = match adapters.map(|a| &a.levels[l]) {
                Some(p) => (p.gamma.clone(), p.beta.clone()),
                None => {
                    let c = self.config.channels_at(l);
                    (Array1::ones(c), Array1::zeros(c))
                }
            };
            let s_mod = apply_modulation(&s, &g, &b)?;
            skip_pre_film[l] = Some(s);
            film_gamma[l] = Some(g);
            let merged = ndarray::concatenate(Axis(0), &[s_mod.view(), u.view()])
                .expect("skip/up channel concat");
            let (out, cache) = self.dec[l].forward_cached(&merged);
            dec_caches[l] = Some(cache);
            d = out;
        }

        // Head: collapse input frames, channels become lead times.
        let head_in = d;
        let z = self.head.forward(&head_in);
        let (t_out, one, h, w) = z.dim();
        debug_assert_eq!(one, 1);
        let z = z
            .into_shape_with_order((1, t_out, h, w))
            .expect("head reshape");
        let probs = sigmoid(z);

        Ok((
            probs.clone(),
            ForwardCache {
                enc: enc_caches,
                enc_out,
                drop_masks,
                pools,
                rcn: rcn_cache,
                mod_gamma: gamma,
                skip_pre_film: skip_pre_film.into_iter().map(Option::unwrap).collect(),
                film_gamma: film_gamma.into_iter().map(Option::unwrap).collect(),
                up_in: up_in.into_iter().map(Option::unwrap).collect(),
                dec: dec_caches.into_iter().map(Option::unwrap).collect(),
                head_in,
                probs,
            },
        ))
    }

    /// Backward from the logits gradient `dz` (`[1][T_out][H][W]`).
    ///
    /// With [`BackwardScope::AdaptersOnly`], `adapter_grads` receives one
    /// `(dγ_f, dβ_f)` pair per skip level and nothing is written to `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dz: &Array4<f32>,
        scope: BackwardScope,
        grads: &mut Grads,
        mut adapter_grads: Option<&mut Vec<(Array1<f32>, Array1<f32>)>>,
    ) {
        let levels = self.config.levels;
        let full = scope == BackwardScope::Full;
        let (_, t_out, h, w) = dz.dim();
        let dz5 = dz
            .clone()
            .into_shape_with_order((t_out, 1, h, w))
            .expect("logits reshape");

        if full {
            let (dw, db) = self.head.grad_params(&cache.head_in, &dz5);
            grads.accumulate("head.w", dw.into_dyn());
            grads.accumulate("head.b", db.into_dyn());
        }
        let mut dd = self.head.backward_data(&dz5, cache.head_in.dim());

        let mut de_skip: Vec<Option<Array4<f32>>> = (0..levels).map(|_| None).collect();
        for l in 0..levels {
            let c_l = self.config.channels_at(l);
            let dconcat = {
                let mut sink_fn;
                let sink: Option<&mut dyn FnMut(&str, ArrayD<f32>)> = if full {
                    sink_fn = |suffix: &str, g: ArrayD<f32>| {
                        grads.accumulate(&format!("dec{l}.{suffix}"), g);
                    };
                    Some(&mut sink_fn)
                } else {
                    None
                };
                self.dec[l].backward(&cache.dec[l], &dd, sink)
            };
            let ds = dconcat.slice(ndarray::s![0..c_l, .., .., ..]).to_owned();
            let du = dconcat.slice(ndarray::s![c_l.., .., .., ..]).to_owned();

            // FiLM backward on the skip path.
            if let Some(ag) = adapter_grads.as_deref_mut() {
                let s = &cache.skip_pre_film[l];
                for ci in 0..c_l {
                    let dplane = ds.index_axis(Axis(0), ci);
                    let splane = s.index_axis(Axis(0), ci);
                    let mut dg = 0.0f32;
                    let mut db = 0.0f32;
                    for (g, v) in dplane.iter().zip(splane.iter()) {
                        dg += g * v;
                        db += g;
                    }
                    ag[l].0[ci] += dg;
                    ag[l].1[ci] += db;
                }
            }
            if full {
                let mut ds_pre = ds.clone();
                for (ci, mut plane) in ds_pre.axis_iter_mut(Axis(0)).enumerate() {
                    let g = cache.film_gamma[l][ci];
                    if g != 1.0 {
                        plane.mapv_inplace(|v| v * g);
                    }
                }
                let (dw, db) = self.skip_convs[l].grad_params(&cache.enc_out[l], &ds_pre);
                grads.accumulate(&format!("skip{l}.w"), dw.into_dyn());
                grads.accumulate(&format!("skip{l}.b"), db.into_dyn());
                de_skip[l] =
                    Some(self.skip_convs[l].backward_data(&ds_pre, cache.enc_out[l].dim()));

                let (dw, db) = self.ups[l].grad_params(&cache.up_in[l], &du);
                grads.accumulate(&format!("up{l}.w"), dw.into_dyn());
                grads.accumulate(&format!("up{l}.b"), db.into_dyn());
            }
            dd = self.ups[l].backward_data(&du, cache.up_in[l].dim());
        }
        if !full {
            return;
        }

        // Modulation backward at the bottleneck: dd is the gradient at the
        // modulated output.
        let e = &cache.enc_out[levels];
        let c_b = self.config.bottleneck_channels();
        let mut dgamma = Array1::<f32>::zeros(c_b);
        let mut dbeta = Array1::<f32>::zeros(c_b);
        let mut de = dd;
        for ci in 0..c_b {
            let dplane = de.index_axis(Axis(0), ci);
            let eplane = e.index_axis(Axis(0), ci);
            let mut dg = 0.0f32;
            let mut db = 0.0f32;
            for (g, v) in dplane.iter().zip(eplane.iter()) {
                dg += g * v;
                db += g;
            }
            dgamma[ci] = dg;
            dbeta[ci] = db;
        }
        for (ci, mut plane) in de.axis_iter_mut(Axis(0)).enumerate() {
            let g = cache.mod_gamma[ci];
            if g != 1.0 {
                plane.mapv_inplace(|v| v * g);
            }
        }

        // Conditioner backward: γ = 1 + Δγ, so dΔγ = dγ.
        let dout = Array1::from_iter(dgamma.iter().chain(dbeta.iter()).copied());
        let (mut dh, dw2, db2) = self.rcn.fc2.backward(&cache.rcn.hidden, &dout);
        grads.accumulate("rcn.fc2.w", dw2.into_dyn());
        grads.accumulate("rcn.fc2.b", db2.into_dyn());
        for (g, &h_v) in dh.iter_mut().zip(cache.rcn.hidden.iter()) {
            if h_v <= 0.0 {
                *g = 0.0;
            }
        }
        let (_, dw1, db1) = self.rcn.fc1.backward(&cache.rcn.one_hot, &dh);
        grads.accumulate("rcn.fc1.w", dw1.into_dyn());
        grads.accumulate("rcn.fc1.b", db1.into_dyn());

        // Encoder backward, threading skip gradients back in.
        let mut g_at = de;
        for l in (0..=levels).rev() {
            if l < levels {
                if let Some(extra) = de_skip[l].take() {
                    g_at += &extra;
                }
            }
            if let Some(mask) = &cache.drop_masks[l] {
                g_at *= mask;
            }
            let d_in = {
                let mut sink_fn = |suffix: &str, g: ArrayD<f32>| {
                    grads.accumulate(&format!("enc{l}.{suffix}"), g);
                };
                self.enc[l].backward(&cache.enc[l], &g_at, Some(&mut sink_fn))
            };
            if l == 0 {
                break;
            }
            g_at = MaxPool2::backward(&cache.pools[l - 1], &d_in);
        }
    }

    /// The regularized kernel set 𝒲: all skip-path and residual-shortcut
    /// 1×1×1 convolutions.
    pub fn ortho_kernels(&self) -> Vec<(String, ArrayView5<'_, f32>)> {
        let mut out = Vec::new();
        for (l, conv) in self.skip_convs.iter().enumerate() {
            out.push((format!("skip{l}.w"), conv.w.view()));
        }
        for (l, unit) in self.enc.iter().enumerate() {
            if let Some(sc) = &unit.shortcut {
                out.push((format!("enc{l}.shortcut.w"), sc.w.view()));
            }
        }
        for (l, unit) in self.dec.iter().enumerate() {
            if let Some(sc) = &unit.shortcut {
                out.push((format!("dec{l}.shortcut.w"), sc.w.view()));
            }
        }
        out
    }

    /// Visits every parameter as `(name, view)` in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<f32>)) {
        fn unit(name: &str, u: &ResidualUnit, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<f32>)) {
            f(&format!("{name}.gn1.gamma"), u.gn1.gamma.view().into_dyn());
            f(&format!("{name}.gn1.beta"), u.gn1.beta.view().into_dyn());
            f(&format!("{name}.conv1.w"), u.conv1.w.view().into_dyn());
            f(&format!("{name}.conv1.b"), u.conv1.b.view().into_dyn());
            f(&format!("{name}.gn2.gamma"), u.gn2.gamma.view().into_dyn());
            f(&format!("{name}.gn2.beta"), u.gn2.beta.view().into_dyn());
            f(&format!("{name}.conv2.w"), u.conv2.w.view().into_dyn());
            f(&format!("{name}.conv2.b"), u.conv2.b.view().into_dyn());
            if let Some(sc) = &u.shortcut {
                f(&format!("{name}.shortcut.w"), sc.w.view().into_dyn());
                f(&format!("{name}.shortcut.b"), sc.b.view().into_dyn());
            }
        }
        for (l, u) in self.enc.iter().enumerate() {
            unit(&format!("enc{l}"), u, f);
        }
        for (l, conv) in self.skip_convs.iter().enumerate() {
            f(&format!("skip{l}.w"), conv.w.view().into_dyn());
            f(&format!("skip{l}.b"), conv.b.view().into_dyn());
        }
        f("rcn.fc1.w", self.rcn.fc1.w.view().into_dyn());
        f("rcn.fc1.b", self.rcn.fc1.b.view().into_dyn());
        f("rcn.fc2.w", self.rcn.fc2.w.view().into_dyn());
        f("rcn.fc2.b", self.rcn.fc2.b.view().into_dyn());
        for (l, up) in self.ups.iter().enumerate() {
            f(&format!("up{l}.w"), up.w.view().into_dyn());
            f(&format!("up{l}.b"), up.b.view().into_dyn());
        }
        for (l, u) in self.dec.iter().enumerate() {
            unit(&format!("dec{l}"), u, f);
        }
        f("head.w", self.head.w.view().into_dyn());
        f("head.b", self.head.b.view().into_dyn());
    }

    /// Mutable parameter visitation; same names and order as
    /// [`Backbone::visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<f32>)) {
        fn unit(
            name: &str,
            u: &mut ResidualUnit,
            f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<f32>),
        ) {
            f(&format!("{name}.gn1.gamma"), u.gn1.gamma.view_mut().into_dyn());
            f(&format!("{name}.gn1.beta"), u.gn1.beta.view_mut().into_dyn());
            f(&format!("{name}.conv1.w"), u.conv1.w.view_mut().into_dyn());
            f(&format!("{name}.conv1.b"), u.conv1.b.view_mut().into_dyn());
            f(&format!("{name}.gn2.gamma"), u.gn2.gamma.view_mut().into_dyn());
            f(&format!("{name}.gn2.beta"), u.gn2.beta.view_mut().into_dyn());
            f(&format!("{name}.conv2.w"), u.conv2.w.view_mut().into_dyn());
            f(&format!("{name}.conv2.b"), u.conv2.b.view_mut().into_dyn());
            if let Some(sc) = &mut u.shortcut {
                f(&format!("{name}.shortcut.w"), sc.w.view_mut().into_dyn());
                f(&format!("{name}.shortcut.b"), sc.b.view_mut().into_dyn());
            }
        }
        for l in 0..self.enc.len() {
            unit(&format!("enc{l}"), &mut self.enc[l], f);
        }
        for (l, conv) in self.skip_convs.iter_mut().enumerate() {
            f(&format!("skip{l}.w"), conv.w.view_mut().into_dyn());
            f(&format!("skip{l}.b"), conv.b.view_mut().into_dyn());
        }
        f("rcn.fc1.w", self.rcn.fc1.w.view_mut().into_dyn());
        f("rcn.fc1.b", self.rcn.fc1.b.view_mut().into_dyn());
        f("rcn.fc2.w", self.rcn.fc2.w.view_mut().into_dyn());
        f("rcn.fc2.b", self.rcn.fc2.b.view_mut().into_dyn());
        for (l, up) in self.ups.iter_mut().enumerate() {
            f(&format!("up{l}.w"), up.w.view_mut().into_dyn());
            f(&format!("up{l}.b"), up.b.view_mut().into_dyn());
        }
        for l in 0..self.dec.len() {
            unit(&format!("dec{l}"), &mut self.dec[l], f);
        }
        f("head.w", self.head.w.view_mut().into_dyn());
        f("head.b", self.head.b.view_mut().into_dyn());
    }

    /// `(backbone_params, conditioner_params)`; conditioner covers the RCN
    /// only — adapter parameters are added by [`count_parameters`].
    pub fn parameter_counts(&self) -> (usize, usize) {
        let mut backbone = 0usize;
        let mut conditioning = 0usize;
        self.visit_params(&mut |name, view| {
            if name.starts_with("rcn.") {
                conditioning += view.len();
            } else {
                backbone += view.len();
            }
        });
        (backbone, conditioning)
    }
}

/// `(backbone_params, conditioning_params)` with conditioning covering the
/// RCN plus every supplied FiLM adapter set.
pub fn count_parameters(backbone: &Backbone, adapters: &[FiLMAdapterSet]) -> (usize, usize) {
    let (b, mut c) = backbone.parameter_counts();
    c += adapters.iter().map(FiLMAdapterSet::parameter_count).sum::<usize>();
    (b, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            levels: 2,
            base_channels: 4,
            out_frames: 4,
            dropout_rate: 0.0,
            ..BackboneConfig::default()
        }
    }

    fn random_input(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Array4::from_shape_simple_fn(dim, || n.sample(&mut rng) as f32)
    }

    fn snapshot(bb: &Backbone) -> BTreeMap<String, ArrayD<f32>> {
        let mut map = BTreeMap::new();
        bb.visit_params(&mut |name, view| {
            map.insert(name.to_string(), view.to_owned());
        });
        map
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small_config();
        let a = Backbone::build(&cfg, 7, 99).unwrap();
        let b = Backbone::build(&cfg, 7, 99).unwrap();
        assert_eq!(snapshot(&a), snapshot(&b));
        let c = Backbone::build(&cfg, 7, 100).unwrap();
        assert_ne!(snapshot(&a), snapshot(&c));
    }

    #[test]
    fn build_rejects_invalid_config() {
        let mut cfg = small_config();
        cfg.levels = 0;
        assert!(Backbone::build(&cfg, 7, 0).is_err());
        let mut cfg = small_config();
        cfg.dropout_rate = 1.0;
        assert!(Backbone::build(&cfg, 7, 0).is_err());
        assert!(Backbone::build(&small_config(), 0, 0).is_err());
    }

    #[test]
    fn ortho_kernel_set_is_enumerable() {
        let bb = Backbone::build(&BackboneConfig::default(), 7, 1).unwrap();
        let kernels = bb.ortho_kernels();
        // 3 skip convs + 4 encoder shortcuts + 3 decoder shortcuts.
        assert_eq!(kernels.len(), 10);
        for (name, view) in &kernels {
            let (_, _, kt, kh, kw) = view.dim();
            assert_eq!((kt, kh, kw), (1, 1, 1), "{name}");
        }
    }

    #[test]
    fn forward_shape_and_range_contract() {
        let cfg = small_config();
        let bb = Backbone::build(&cfg, 3, 7).unwrap();
        let x = random_input((11, 4, 16, 12), 1);
        let tag = RegionTag::new(1, 2019, 3).unwrap();
        let p = bb.forward(&x, &tag, None).unwrap();
        assert_eq!(p.dim(), (1, 4, 16, 12));
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let cfg = small_config();
        let bb = Backbone::build(&cfg, 3, 7).unwrap();
        let tag = RegionTag::new(0, 2019, 3).unwrap();
        assert!(bb.forward(&random_input((10, 4, 16, 16), 1), &tag, None).is_err());
        assert!(bb.forward(&random_input((11, 4, 18, 16), 1), &tag, None).is_err());
        let bad_tag = RegionTag::new(1, 2019, 5).unwrap();
        assert!(bb.forward(&random_input((11, 4, 16, 16), 1), &bad_tag, None).is_err());
    }

    #[test]
    fn identity_adapters_match_absent_bitwise() {
        let cfg = small_config();
        let bb = Backbone::build(&cfg, 3, 7).unwrap();
        let x = random_input((11, 4, 16, 16), 2);
        let tag = RegionTag::new(2, 2020, 3).unwrap();
        let ident = FiLMAdapterSet::identity(&cfg, 2, 2020);
        let p_absent = bb.forward(&x, &tag, None).unwrap();
        let p_ident = bb.forward(&x, &tag, Some(&ident)).unwrap();
        for (a, b) in p_absent.iter().zip(p_ident.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adapter_key_mismatch_is_rejected() {
        let cfg = small_config();
        let bb = Backbone::build(&cfg, 3, 7).unwrap();
        let x = random_input((11, 4, 16, 16), 3);
        let tag = RegionTag::new(0, 2019, 3).unwrap();
        let wrong = FiLMAdapterSet::identity(&cfg, 1, 2019);
        assert!(bb.forward(&x, &tag, Some(&wrong)).is_err());
    }

    #[test]
    fn perturbed_adapter_changes_output() {
        let cfg = small_config();
        let bb = Backbone::build(&cfg, 3, 7).unwrap();
        let x = random_input((11, 4, 16, 16), 4);
        let tag = RegionTag::new(0, 2019, 3).unwrap();
        let base = bb.forward(&x, &tag, None).unwrap();
        let mut adapters = FiLMAdapterSet::identity(&cfg, 0, 2019);
        adapters.levels[1].gamma[0] += 0.1;
        let shifted = bb.forward(&x, &tag, Some(&adapters)).unwrap();
        let linf = base
            .iter()
            .zip(shifted.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(linf > 0.0, "perturbed adapter left the output unchanged");
    }

    #[test]
    fn modulation_examples() {
        let x = Array4::from_elem((2, 1, 2, 2), 3.0f32);
        let y = apply_modulation(&x, &Array1::ones(2), &Array1::zeros(2)).unwrap();
        assert_eq!(y, x);

        let y = apply_modulation(&x, &Array1::zeros(2), &Array1::from_elem(2, 5.0)).unwrap();
        assert!(y.iter().all(|&v| v == 5.0));

        let x = Array4::ones((3, 1, 2, 2));
        let y =
            apply_modulation(&x, &Array1::from_elem(3, 2.0), &Array1::from_elem(3, -1.0)).unwrap();
        assert!(y.iter().all(|&v| v == 1.0));

        assert!(apply_modulation(&x, &Array1::ones(2), &Array1::zeros(3)).is_err());
    }

    #[test]
    fn modulation_is_linear_in_x() {
        let a = random_input((3, 2, 4, 4), 10);
        let b = random_input((3, 2, 4, 4), 11);
        let gamma = Array1::from_vec(vec![0.5, -1.5, 2.0]);
        let zeros = Array1::zeros(3);
        let lhs = apply_modulation(&(&a.mapv(|v| 2.0 * v) + &b.mapv(|v| 3.0 * v)), &gamma, &zeros)
            .unwrap();
        let rhs = apply_modulation(&a, &gamma, &zeros).unwrap().mapv(|v| 2.0 * v)
            + apply_modulation(&b, &gamma, &zeros).unwrap().mapv(|v| 3.0 * v);
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert!((l - r).abs() < 1e-4);
        }
    }

    #[test]
    fn rcn_identity_at_init() {
        let bb = Backbone::build(&small_config(), 7, 5).unwrap();
        for region in 0..7 {
            let one_hot = region_one_hot(region, 7).unwrap();
            let (gamma, beta) = bb.conditioner().forward(&one_hot).unwrap();
            assert!(gamma.iter().all(|v| v.to_bits() == 1.0f32.to_bits()));
            assert!(beta.iter().all(|v| v.to_bits() == 0.0f32.to_bits()));
        }
        // Even an all-zero input maps to the identity under the zero head.
        let (gamma, beta) = bb.conditioner().forward(&Array1::zeros(7)).unwrap();
        assert!(gamma.iter().all(|&v| v == 1.0));
        assert!(beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rcn_rejects_length_mismatch() {
        let bb = Backbone::build(&small_config(), 7, 5).unwrap();
        assert!(bb.conditioner().forward(&Array1::zeros(4)).is_err());
    }

    #[test]
    fn parameter_overhead_under_one_percent_at_default() {
        let cfg = BackboneConfig::default();
        let bb = Backbone::build(&cfg, 7, 1).unwrap();
        let adapters: Vec<FiLMAdapterSet> = (0..7)
            .flat_map(|r| [2019, 2020].map(|y| FiLMAdapterSet::identity(&cfg, r, y)))
            .collect();
        let (backbone, conditioning) = count_parameters(&bb, &adapters);
        let ratio = conditioning as f64 / backbone as f64;
        assert!(ratio < 0.01, "ratio {ratio} (backbone {backbone}, cond {conditioning})");

        // Per-level adapter size is exactly 2C.
        let one = FiLMAdapterSet::identity(&cfg, 0, 2019);
        for (l, pair) in one.levels.iter().enumerate() {
            assert_eq!(pair.gamma.len() + pair.beta.len(), 2 * cfg.channels_at(l));
        }

        // Doubling base channels grows the backbone and keeps the ratio < 1%.
        let wide = BackboneConfig {
            base_channels: 64,
            ..cfg
        };
        let bb2 = Backbone::build(&wide, 7, 1).unwrap();
        let adapters2: Vec<FiLMAdapterSet> = (0..7)
            .flat_map(|r| [2019, 2020].map(|y| FiLMAdapterSet::identity(&wide, r, y)))
            .collect();
        let (b2, c2) = count_parameters(&bb2, &adapters2);
        assert!(b2 > backbone);
        assert!((c2 as f64 / b2 as f64) < 0.01);
    }

    /// Directional finite-difference check of the full backward graph,
    /// including conditioner parameters.
    #[test]
    fn whole_model_gradient_check() {
        let cfg = BackboneConfig {
            levels: 2,
            base_channels: 4,
            out_frames: 3,
            dropout_rate: 0.0,
            ..BackboneConfig::default()
        };
        let mut bb = Backbone::build(&cfg, 3, 21).unwrap();
        // Jitter every parameter away from special points (zero conditioner
        // head, unit GN gains) so all paths carry signal.
        let mut jrng = ChaCha8Rng::seed_from_u64(77);
        let jn = Normal::new(0.0, 0.05).unwrap();
        bb.visit_params_mut(&mut |_, mut view| {
            view.mapv_inplace(|v| v + jn.sample(&mut jrng) as f32);
        });

        let x = random_input((11, 4, 8, 8), 6);
        let tag = RegionTag::new(1, 2019, 3).unwrap();
        let m = random_input((1, 3, 8, 8), 8);

        let loss = |bb: &Backbone| -> f64 {
            let p = bb.forward(&x, &tag, None).unwrap();
            p.iter().zip(m.iter()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };

        let (p, cache) = bb.forward_train(&x, &tag, None, None).unwrap();
        // d(loss)/dz for loss = Σ m·σ(z).
        let mut dz = m.clone();
        for (g, &pv) in dz.iter_mut().zip(p.iter()) {
            *g *= pv * (1.0 - pv);
        }
        let mut grads = Grads::default();
        bb.backward(&cache, &dz, BackwardScope::Full, &mut grads, None);

        // Random direction over all parameters, normalized to unit L2 norm
        // so the probe stays inside the locally-linear regime.
        let mut drng = ChaCha8Rng::seed_from_u64(123);
        let dn = Normal::new(0.0, 1.0).unwrap();
        let mut direction: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
        bb.visit_params(&mut |name, view| {
            let d = ArrayD::from_shape_simple_fn(view.raw_dim(), || dn.sample(&mut drng) as f32);
            direction.insert(name.to_string(), d);
        });
        let norm: f64 = direction
            .values()
            .map(|d| d.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        for d in direction.values_mut() {
            d.mapv_inplace(|v| (f64::from(v) / norm) as f32);
        }

        let analytic: f64 = direction
            .iter()
            .map(|(name, d)| {
                grads.get(name).map_or(0.0, |g| {
                    g.iter().zip(d.iter()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
                })
            })
            .sum();

        let h = 1e-2f32;
        let apply = |bb: &mut Backbone, sign: f32| {
            bb.visit_params_mut(&mut |name, mut view| {
                let d = &direction[name];
                view.zip_mut_with(d, |v, dv| *v += sign * h * dv);
            });
        };
        apply(&mut bb, 1.0);
        let fp = loss(&bb);
        apply(&mut bb, -2.0);
        let fm = loss(&bb);
        apply(&mut bb, 1.0);
        let fd = (fp - fm) / (2.0 * f64::from(h));

        let rel = (fd - analytic).abs() / analytic.abs().max(1e-6);
        assert!(rel < 5e-2, "fd={fd} analytic={analytic} rel={rel}");
    }

    /// Same check for adapter gradients under the frozen-backbone scope.
    #[test]
    fn adapter_gradient_check() {
        let cfg = BackboneConfig {
            levels: 2,
            base_channels: 4,
            out_frames: 3,
            dropout_rate: 0.0,
            ..BackboneConfig::default()
        };
        let bb = Backbone::build(&cfg, 3, 22).unwrap();
        let x = random_input((11, 4, 8, 8), 30);
        let tag = RegionTag::new(0, 2020, 3).unwrap();
        let m = random_input((1, 3, 8, 8), 31);

        let mut adapters = FiLMAdapterSet::identity(&cfg, 0, 2020);
        let mut arng = ChaCha8Rng::seed_from_u64(40);
        let an = Normal::new(0.0, 0.1).unwrap();
        for pair in &mut adapters.levels {
            pair.gamma.mapv_inplace(|v| v + an.sample(&mut arng) as f32);
            pair.beta.mapv_inplace(|v| v + an.sample(&mut arng) as f32);
        }

        let loss = |ad: &FiLMAdapterSet| -> f64 {
            let p = bb.forward(&x, &tag, Some(ad)).unwrap();
            p.iter().zip(m.iter()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };

        let (p, cache) = bb.forward_train(&x, &tag, Some(&adapters), None).unwrap();
        let mut dz = m.clone();
        for (g, &pv) in dz.iter_mut().zip(p.iter()) {
            *g *= pv * (1.0 - pv);
        }
        let mut grads = Grads::default();
        let mut ag: Vec<(Array1<f32>, Array1<f32>)> = (0..cfg.levels)
            .map(|l| {
                let c = cfg.channels_at(l);
                (Array1::zeros(c), Array1::zeros(c))
            })
            .collect();
        bb.backward(&cache, &dz, BackwardScope::AdaptersOnly, &mut grads, Some(&mut ag));
        assert!(grads.map.is_empty(), "frozen scope must not touch backbone grads");

        let h = 1e-3f32;
        for l in 0..cfg.levels {
            for ci in 0..cfg.channels_at(l) {
                let mut ap = adapters.clone();
                ap.levels[l].gamma[ci] += h;
                let mut am = adapters.clone();
                am.levels[l].gamma[ci] -= h;
                let fd = (loss(&ap) - loss(&am)) / (2.0 * f64::from(h));
                let an = f64::from(ag[l].0[ci]);
                assert!(
                    (fd - an).abs() / an.abs().max(1e-4) < 5e-2,
                    "gamma level {l} ch {ci}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn deterministic_dropout_forward() {
        let cfg = BackboneConfig {
            dropout_rate: 0.4,
            ..small_config()
        };
        let bb = Backbone::build(&cfg, 3, 50).unwrap();
        let x = random_input((11, 4, 16, 16), 51);
        let tag = RegionTag::new(0, 2019, 3).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (p1, _) = bb.forward_train(&x, &tag, None, Some(&mut r1)).unwrap();
        let (p2, _) = bb.forward_train(&x, &tag, None, Some(&mut r2)).unwrap();
        assert_eq!(p1, p2);
        // Dropout off (inference) differs from dropout on in general.
        let p3 = bb.forward(&x, &tag, None).unwrap();
        assert_ne!(p1, p3);
    }
}
