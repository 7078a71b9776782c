//! One-step distillation, bitrate adaptation of the one-step model, and use
//! of a trained codec as a perceptual loss for other decoders.

mod dmd;
mod gan;
mod perceptual;
mod state;

pub use dmd::{dmd_direction, dmd_surrogate, DmdTimeRange, DmdWeighting, FrozenModel};
pub use gan::{hinge_discriminator_loss, hinge_generator_loss, PatchDiscriminator};
pub use perceptual::{PerceptualSupervisor, ToyMseCodec};
pub use state::{
    finetune_adapters, finetune_full, generate, Critics, DistillConfig, DistillReport,
    DistillState, FinetuneStage, Generated, OneStepLossReport, Turn, STAGE_DISTILLED,
    STAGE_FINETUNE_ONE, STAGE_FINETUNE_TWO,
};
