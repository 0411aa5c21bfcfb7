pub mod analysis;
pub mod augment;
pub mod error;
pub mod explain;
pub mod frame;
pub mod nncore;
pub mod optflow;
pub mod pipeline;
pub mod preprocess;
pub mod svmbaseline;
pub mod synthgen;
pub mod twostream;

pub use error::{Error, Result};
pub use frame::{Frame, VideoClip};
