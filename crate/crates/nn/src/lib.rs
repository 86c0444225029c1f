//! Small dense tensor library for training the link-adaptation predictors:
//! a recorded-graph reverse-mode tape, the handful of layer kinds the models
//! need, Adam, a finite-difference gradient checker and a binary checkpoint
//! format.
//!
//! ```
//! use amc_nn::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.insert("w", Tensor::from_vec(vec![2.0, -1.0])).unwrap();
//! let mut tape = Tape::new();
//! let wn = tape.param(&store, w);
//! let x = tape.input(Tensor::from_vec(vec![3.0, 4.0]));
//! let prod = tape.mul(wn, x).unwrap();
//! let loss = tape.sum(prod);
//! tape.backward(loss, &mut store).unwrap();
//! assert_eq!(store.get(w).grad().unwrap(), &[3.0, 4.0]);
//! ```

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, projection_loss, GradCheckReport};
pub use layers::{Layer, LayerSpec, TransformerBlock};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, NodeId, Tape};
pub use tensor::{numel, Tensor};
