//! Student-teacher self-distillation: projection heads, losses, schedules and
//! the training loop.

mod head;
mod loss;
mod schedule;
mod train;

pub use head::{head_forward, init_head, HeadConfig, HeadOutput, DINO_HEAD, IBOT_HEAD};
pub use loss::{
    center_update, dino_global_loss, ema_update, ibot_masked_loss, koleo_regularizer, nearest_neighbours,
    teacher_targets, KOLEO_EPS,
};
pub use schedule::{ScheduleConfig, ScheduleState};
pub use train::{
    ssl_step, student_loss, teacher_forward, train_ssl, CropBatch, FixedViews, LossParts, LossWeights, SslConfig,
    SslError, SslModel, SslRun, StepMetrics, TeacherOutput, TileViews, ViewSource,
};
