//! Motion deblurring guided by complementary-vision-sensor difference signals.
//!
//! * [`sensor`] simulates the spatial/temporal difference pathway and the
//!   exposure-integrated RGB blur, and reads/writes the sample layout.
//! * [`autograd`] is a small dense tensor engine with reverse-mode
//!   differentiation, AdamW and the cosine schedule.
//! * [`net`] is the recurrent deblurring network.
//! * [`train`] holds the loss, the training loop and checkpoint helpers.
//! * [`metrics`] provides PSNR, SSIM and the rotating-disk edge-width metric.

pub mod autograd;
pub mod metrics;
pub mod net;
pub mod sensor;
pub mod train;
