//! Network building blocks and the UNet used by all three stages.

mod checkpoint;
mod init;
mod layers;
mod params;
mod unet;

pub use checkpoint::Checkpoint;
pub use init::{xavier_bound, xavier_init, xavier_init_store};
pub use layers::{BatchNorm, Conv2d, ConvBlock, Norm, NormKind, SeBlock, SwitchNorm, NORM_EPS, RUNNING_MOMENTUM};
pub use params::{Buffer, BufferId, Ctx, NormMode, Param, ParamId, ParamKind, ParamStore, PassOutput};
pub use unet::{build_unet, FinalActivation, Scale, UNet, UNetSpec};
