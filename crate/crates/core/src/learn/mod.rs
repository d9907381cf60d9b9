//! Loss, gradient verification, synthetic data and toy training.

pub mod gradcheck;
pub mod loss;
pub mod synth;
pub mod train;

pub use gradcheck::{grad_check, grad_check_with, model_grad_check, GradCheckReport, InputCheck};
pub use loss::{mix_laplace, mix_laplace_grad, mol_frame_loss, sequence_loss, sequence_loss_flows, LossConfig};
pub use synth::{make_synth, warp_psnr, SynthSample};
pub use train::{heldout_epe, heldout_loss, loss_and_grads, sample_epe, train_toy, Adam, TrainConfig, TrainLog, TrainRow};
