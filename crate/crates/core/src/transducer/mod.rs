//! Joint network, alignment-lattice loss with FastEmit, the full model and
//! its training loop.

pub mod joint;
pub mod loss;
pub mod model;
pub mod train;


pub use joint::JointNetwork;
pub use loss::{fastemit_adjust, rnnt_loss, transducer_loss, Lattice, LossConfig, RnntOutput, TransitionGrads};
pub use model::{ModelConfig, TransducerModel, UtteranceGrad};
pub use train::{train, training_step, MaskSchedule, Sgd, SgdConfig, StepReport, TrainConfig, Utterance};
