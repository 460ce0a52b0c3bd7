//! The online predict-update point tracker.
//!
//! Each frame runs `layers` predict-update stages. The first stage predicts
//! the query distribution from the frozen initial sample `f_init` and the
//! streaming/collision memories; every stage then correlates the distribution
//! with the frame's features, keeps the top-`K` cells as reference points and
//! refines the distribution with deformable attention around them. Two heads
//! read the final distribution at the last reference point to produce the
//! position offset, visibility and confidence.

mod attention;
mod state;
mod tracker;

use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::nn::{Builder, Mlp, Norm};
use crate::params::{Init, ParamStore};
use crate::tensor::Real;
use crate::{Error, Result};

pub use attention::{CrossAttn, DeformAttn, DeformOut};
pub use state::{MemSlot, Memory, QueryState};
pub use tracker::{
    collision, correlation, init_queries, predict, select_references, step, update, FramePrediction, LayerTrace,
    OnlineTracker, Probe, ReferenceSet, TrackOutput,
};

/// How the correlation map between distributions and features is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    /// `⟨f, o⟩ / sqrt(d)`.
    #[default]
    Dot,
    /// Cosine similarity scaled by [`COSINE_TEMPERATURE`].
    Cosine,
}

pub const COSINE_TEMPERATURE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension of `o` and of every query distribution.
    pub d: usize,
    /// Base channel count of the encoder's first stage.
    pub enc_channels: usize,
    /// Number of predict-update layers.
    pub layers: usize,
    /// Memory length `N_s` of the streaming and collision buffers.
    pub mem_len: usize,
    /// Sampling points of the collision operator.
    pub collision_points: usize,
    /// Offsets predicted per reference point in the update step.
    pub update_offsets: usize,
    /// Sampling points of each output head.
    pub head_points: usize,
    /// Hidden width of every MLP, as a multiple of `d`.
    pub mlp_ratio: usize,
    /// Run the memory cross-attentions in every layer instead of only the first.
    pub phi_every_layer: bool,
    pub correlation: CorrelationKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            enc_channels: 16,
            layers: 3,
            mem_len: 12,
            collision_points: 9,
            update_offsets: 4,
            head_points: 9,
            mlp_ratio: 2,
            phi_every_layer: false,
            correlation: CorrelationKind::Dot,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || !self.d.is_multiple_of(4) {
            return bad("d must be a positive multiple of 4");
        }
        if self.layers == 0 {
            return bad("layers must be >= 1");
        }
        if self.mem_len == 0 {
            return bad("mem_len must be >= 1");
        }
        if self.collision_points == 0 || self.update_offsets == 0 || self.head_points == 0 || self.mlp_ratio == 0 {
            return bad("point counts and mlp_ratio must be >= 1");
        }
        if self.enc_channels == 0 {
            return bad("enc_channels must be >= 1");
        }
        Ok(())
    }

    /// Reference points kept per layer: 9 in the first, 1 in the last, 4 between.
    pub fn k_schedule(&self) -> Vec<usize> {
        k_schedule(self.layers)
    }
}

pub fn k_schedule(layers: usize) -> Vec<usize> {
    (0..layers)
        .map(|l| match l {
            _ if l + 1 == layers => 1,
            0 => 9,
            _ => 4,
        })
        .collect()
}

/// How a layer produces its predicted distribution.
#[derive(Clone, Debug)]
pub enum PredictBlock {
    /// `φ_c(φ_s(query, f_s), f_c)`.
    Memory { streaming: CrossAttn, collision: CrossAttn },
    /// Residual MLP refinement of the running distribution.
    Refine(Mlp),
}

#[derive(Clone, Debug)]
pub struct LayerNet {
    pub k: usize,
    pub predict: PredictBlock,
    /// Scores each reference point from `[f, o(r)]`.
    pub ref_head: Mlp,
    pub update: DeformAttn,
    pub update_norm: Norm,
    pub update_mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub attn: DeformAttn,
    pub mlp: Mlp,
}

/// Parameter layout of the whole tracker (encoder included).
#[derive(Clone, Debug)]
pub struct LbmNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub layers: Vec<LayerNet>,
    pub collision: DeformAttn,
    pub track_head: Head,
    pub vis_head: Head,
}

impl LbmNet {
    pub fn build<F: Real>(cfg: &ModelConfig, bld: &mut Builder<F>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let hidden = cfg.mlp_ratio * d;
        let encoder = Encoder::new(bld, cfg.enc_channels, d)?;
        let layers = cfg
            .k_schedule()
            .into_iter()
            .enumerate()
            .map(|(l, k)| {
                let predict = if l == 0 || cfg.phi_every_layer {
                    PredictBlock::Memory {
                        streaming: CrossAttn::new(bld, &format!("layer{l}.phi_s"), d, hidden),
                        collision: CrossAttn::new(bld, &format!("layer{l}.phi_c"), d, hidden),
                    }
                } else {
                    PredictBlock::Refine(Mlp::residual(bld, &format!("layer{l}.refine"), d, hidden))
                };
                LayerNet {
                    k,
                    predict,
                    ref_head: Mlp::new(bld, &format!("layer{l}.ref_head"), 2 * d, d, 1),
                    update: DeformAttn::new(bld, &format!("layer{l}.psi"), d, k * cfg.update_offsets),
                    update_norm: Norm::new(bld, &format!("layer{l}.psi_norm"), d),
                    update_mlp: Mlp::residual(bld, &format!("layer{l}.psi_mlp"), d, hidden),
                }
            })
            .collect();
        let collision = DeformAttn::new(bld, "collision", d, cfg.collision_points);
        let track_head = Head {
            attn: DeformAttn::new(bld, "track_head.attn", d, cfg.head_points),
            mlp: Mlp::new(bld, "track_head.mlp", d, hidden, 2),
        };
        let vis_head = Head {
            attn: DeformAttn::new(bld, "vis_head.attn", d, cfg.head_points),
            mlp: Mlp::new(bld, "vis_head.mlp", d, hidden, 2),
        };
        Ok(Self { cfg: cfg.clone(), encoder, layers, collision, track_head, vis_head })
    }
}

/// Network layout plus its parameter values.
#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub net: LbmNet,
    pub params: ParamStore<F>,
}

impl<F: Real> Model<F> {
    /// Freshly initialized model; identical `(cfg, seed)` give identical parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::default();
        let mut init = Init::new(seed);
        let net = LbmNet::build(cfg, &mut Builder { store: &mut params, init: &mut init })?;
        Ok(Self { net, params })
    }

    /// Rebuilds the layout for `cfg` around existing parameter values,
    /// checking that names and shapes agree.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let fresh = Self::new(cfg, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((na, ta), (nb, tb)) in fresh.params.iter().zip(params.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Config(format!("parameter mismatch: {na}{:?} vs {nb}{:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(Self { net: fresh.net, params })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model { net: self.net.clone(), params: self.params.cast() }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_schedule_matches_layer_count() {
        assert_eq!(k_schedule(3), vec![9, 4, 1]);
        assert_eq!(k_schedule(4), vec![9, 4, 4, 1]);
        assert_eq!(k_schedule(2), vec![9, 1]);
        assert_eq!(k_schedule(1), vec![1]);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig { d: 16, enc_channels: 4, ..Default::default() };
        let a = Model::<f32>::new(&cfg, 7).unwrap();
        let b = Model::<f32>::new(&cfg, 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::<f32>::new(&cfg, 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn offset_predictors_start_at_zero() {
        let m = Model::<f32>::new(&ModelConfig { d: 16, enc_channels: 4, ..Default::default() }, 1).unwrap();
        for (name, t) in m.params.iter() {
            if name.contains(".offsets.") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
}
