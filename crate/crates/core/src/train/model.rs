use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointMeta, NamedTensor, TrainState};
use crate::error::{Error, Result};
use crate::features::{Backbone, BackboneConfig};
use crate::geometry::GroundTruth;
use crate::image::Image;
use crate::nn::{Adam, AdamState, Param, Parameterized};
use crate::proposals::{
    load_external_proposals, nc_match, oracle_match, NcConfig, NcMatcher, OracleConfig, ProposalSet, ProposalSpec,
};
use crate::refine::{refine_matches, PairPyramids, RefinedMatch, Refiner, RefinerConfig};
use crate::seed::derive_seed;

const INIT_STREAM: u64 = 0x1417;

/// Backbone, refiner and proposal matcher. Only the backbone and refiner
/// are visited as trainable parameters; the matcher is fit separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub refiner: Refiner,
    pub nc: NcMatcher,
}

impl Parameterized for Model {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.refiner.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.refiner.params_mut());
        v
    }
}

fn tensor_of(p: &Param) -> NamedTensor {
    NamedTensor {
        name: p.name.clone(),
        shape: p.shape.clone(),
        data: p.value.clone(),
    }
}

fn load_param(p: &mut Param, ckpt: &Checkpoint, name: &str) -> Result<Vec<f64>> {
    let t = ckpt.tensor(name)?;
    if t.shape != p.shape {
        return Err(Error::Checkpoint(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            t.shape, p.shape
        )));
    }
    Ok(t.data.clone())
}

impl Model {
    pub fn new(backbone: BackboneConfig, refiner: RefinerConfig, nc: NcConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM));
        let backbone = Backbone::new(backbone, &mut rng)?;
        let refiner = Refiner::new(refiner, backbone.config.gather_channels(), &mut rng)?;
        Ok(Self {
            backbone,
            refiner,
            nc: NcMatcher::new(nc),
        })
    }

    pub fn set_reduced_precision(&mut self, on: bool) {
        self.backbone.set_reduced_precision(on);
        self.refiner.set_reduced_precision(on);
    }

    pub fn to_checkpoint(&self, adam: &Adam, state: &TrainState) -> Checkpoint {
        let mut tensors: Vec<NamedTensor> = self.params().into_iter().map(tensor_of).collect();
        tensors.extend(self.nc.params().into_iter().map(tensor_of));
        for (p, s) in self.params().into_iter().zip(&adam.states) {
            for (kind, data) in [("m", &s.m), ("v", &s.v)] {
                tensors.push(NamedTensor {
                    name: format!("adam.{kind}/{}", p.name),
                    shape: p.shape.clone(),
                    data: data.clone(),
                });
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                backbone: self.backbone.config.clone(),
                refiner: self.refiner.config.clone(),
                nc: self.nc.config,
                state: TrainState {
                    adam_step: adam.step,
                    ..state.clone()
                },
            },
            tensors,
        }
    }

    /// Rebuilds the model, its optimizer state and the schedule position.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Adam, TrainState)> {
        let meta = &ckpt.meta;
        let mut model = Model::new(meta.backbone.clone(), meta.refiner.clone(), meta.nc, 0)?;
        let mut adam = Adam::new();
        adam.step = meta.state.adam_step;
        let with_adam = ckpt.tensors.iter().any(|t| t.name.starts_with("adam."));
        for p in model.params_mut() {
            p.value = load_param(p, ckpt, &p.name.clone())?;
            if with_adam {
                adam.states.push(AdamState {
                    name: p.name.clone(),
                    m: load_param(p, ckpt, &format!("adam.m/{}", p.name))?,
                    v: load_param(p, ckpt, &format!("adam.v/{}", p.name))?,
                });
            }
        }
        for p in model.nc.params_mut() {
            p.value = load_param(p, ckpt, &p.name.clone())?;
        }
        Ok((model, adam, meta.state.clone()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?)?.0)
    }

    pub fn pyramids(&self, a: &Image, b: &Image) -> Result<PairPyramids> {
        Ok((self.backbone.extract(a)?, self.backbone.extract(b)?))
    }

    /// Proposals for one pair. Oracle proposals need `gt`; `score_threshold`
    /// applies to the correlation matcher only.
    pub fn propose(
        &self,
        spec: &ProposalSpec,
        pyramids: &PairPyramids,
        gt: Option<&GroundTruth>,
        oracle: &OracleConfig,
        score_threshold: f64,
        seed: u64,
    ) -> Result<ProposalSet> {
        match spec {
            ProposalSpec::Nc => nc_match(&self.nc, &pyramids.0, &pyramids.1, score_threshold),
            ProposalSpec::Oracle => {
                let gt = gt.ok_or_else(|| Error::Config("oracle proposals need homography ground truth".into()))?;
                oracle_match(gt, oracle.n, oracle.jitter, pyramids.0.image_size(), seed)
            }
            ProposalSpec::External(path) => load_external_proposals(path),
        }
    }

    /// Refines every proposal (no confidence filtering).
    pub fn refine(&self, pyramids: &PairPyramids, proposals: &ProposalSet) -> Result<Vec<RefinedMatch>> {
        refine_matches(&pyramids.0, &pyramids.1, proposals, &self.refiner)
    }
}
