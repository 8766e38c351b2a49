//! Simulated memristive crossbar arrays running the recurrent kernels.

mod deploy;
mod device;
mod mapping;

pub use deploy::{deploy_model, Chip, DeployedModel, DeploymentPlan, Evaluation, SignalRanges};
pub use device::{program, xbar_kernel_step, xbar_vmm, DeviceModel, PeripheryModel, XbarState, G_PHYS_MAX};
pub use mapping::{
    expand_complex, expand_to_block, is_complex_block, kernel_weight_range, map_kernel, weight_to_pair, BlockRole,
    ConductanceProgram, CrossbarLayout, ARRAY_SIZE, G_OFF, G_ON, G_SPAN,
};
