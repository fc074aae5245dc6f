//! End-to-end helpers on a synthetic world: spaces, splits, the pretrained
//! starting encoder, training and both evaluation protocols.

use crate::concept_space::{build_category_space, build_description_space};
use crate::config::RunConfig;
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::eval::{linear_probe, zero_shot_classify, EvalReport};
use crate::numerics::Tensor;
use crate::pretrain::pretrain_frame_encoder;
use crate::synth_world::{
    export_label_embeddings, generate_dataset, generate_world, Split, SynthDataset, SynthWorld,
};
use crate::trainer::{run_training, ConceptSpaces, RunOutput, TrainConfig, TrainerState};

/// Category and description spaces built from a world's label embeddings,
/// one row per class in class order.
pub fn world_spaces(world: &SynthWorld, cfg: &RunConfig) -> Result<ConceptSpaces> {
    let (cats, groups) = export_label_embeddings(world)?;
    Ok(ConceptSpaces {
        category: build_category_space(&cats)?,
        description: Some(build_description_space(&groups, cfg.space.pooling)?),
    })
}

pub fn frames(ds: &SynthDataset) -> Vec<&Tensor> {
    ds.videos.iter().map(|v| &v.frames).collect()
}

pub fn labels(ds: &SynthDataset) -> Vec<usize> {
    ds.videos.iter().map(|v| v.class).collect()
}

/// A world with its spaces, splits and pretrained starting encoder.
pub struct Experiment {
    pub cfg: RunConfig,
    pub world: SynthWorld,
    pub spaces: ConceptSpaces,
    pub train: SynthDataset,
    pub test: SynthDataset,
    pub init: EncoderParams,
}

impl Experiment {
    pub fn build(cfg: &RunConfig) -> Result<Experiment> {
        cfg.validate()?;
        let world = generate_world(&cfg.world)?;
        let spaces = world_spaces(&world, cfg)?;
        let train = generate_dataset(
            &world,
            Split::Train,
            cfg.data.train_per_class,
            cfg.data.mixed_fraction,
        )?;
        let test = generate_dataset(&world, Split::Test, cfg.data.test_per_class, 0.0)?;
        let init = pretrain_frame_encoder(&world, &cfg.encoder, &cfg.pretrain)?;
        Ok(Experiment {
            cfg: cfg.clone(),
            world,
            spaces,
            train,
            test,
            init,
        })
    }

    /// Self-supervised training from the starting encoder; labels are never
    /// passed in.
    pub fn train(&self, train: &TrainConfig, out: &RunOutput) -> Result<TrainerState> {
        let state = TrainerState::new(self.init.clone(), &self.spaces, train);
        run_training(state, &frames(&self.train), &self.spaces, train, out)
    }

    pub fn zero_shot(&self, params: &EncoderParams) -> Result<EvalReport> {
        let (_, r) = zero_shot_classify(
            params,
            &frames(&self.test),
            &labels(&self.test),
            &self.spaces.category,
            self.cfg.zero_shot_crops,
        )?;
        Ok(r)
    }

    pub fn linear_probe(&self, params: &EncoderParams) -> Result<EvalReport> {
        linear_probe(
            params,
            (&frames(&self.train), &labels(&self.train)),
            (&frames(&self.test), &labels(&self.test)),
            self.cfg.world.num_classes,
            &self.cfg.probe,
        )
    }
}
