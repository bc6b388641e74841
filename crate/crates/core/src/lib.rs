//! Spiking recurrent cells (Cuba-LIF, SpikGRU and the convolutional CS-GRU
//! family), a small reverse-mode autodiff tape to train them with
//! surrogate gradients, and the data and benchmarking plumbing around them.

pub mod autodiff;
pub mod bench;
pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
