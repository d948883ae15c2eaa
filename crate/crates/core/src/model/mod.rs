//! Fusion network, its training loops and checkpoint format.

mod checkpoint;
mod data;
mod net;
mod train;

pub use checkpoint::{Checkpoint, TrainMeta, FORMAT_VERSION, MAGIC};
pub use data::{crop, dihedral, load_brackets, load_brackets_with, random_view, samples_from_brackets, stack, Sample};
pub(crate) use net::kaiming_uniform;
pub use net::{
    bracket_input, image_tensor, tensor_to_image, ForwardOptions, FusionNet, FusionNetConfig, ParamVars,
    INPUT_CHANNELS, MID_LINEAR_OFFSET,
};
pub use train::{finetune, fit, loss, mean_loss, predict, train, train_step, TrainConfig, TrainReport};
