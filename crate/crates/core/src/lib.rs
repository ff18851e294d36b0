//! Chessformer: a transformer that plays chess, trained at desk scale.
//!
//! The crate is organised bottom-up: chess rules, position encoding, a tape
//! autodiff engine, the transformer model, losses, teacher-labelled data
//! generation, training, match play and introspection tooling.

pub mod arena;
pub mod attention;
pub mod autodiff;
pub mod chess;
pub mod data;
pub mod encoding;
pub mod interface;
pub mod introspect;
pub mod losses;
pub mod training;
pub mod model;
