//! Scene text recognition trained by distilling a frozen CLIP teacher.
//!
//! The teacher cascades the CLIP image encoder with the reversed CLIP text
//! encoder to form a stage-wise image-to-text guidance flow; trainable
//! alignment heads (AAM/GAM) project student features into teacher spaces
//! and a second-order linguistic consistency loss matches them. At
//! inference only the recognizer remains.

pub mod align;
pub mod charset;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod params;
pub mod pretrain;
pub mod student;
pub mod teacher;
pub mod tensor_util;
pub mod trainer;

pub use charset::LabelCodec;
pub use error::{Error, Result};
