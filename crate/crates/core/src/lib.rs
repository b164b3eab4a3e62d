pub mod check;
pub mod data;
pub mod diff;
pub mod encoders;
pub mod fusion;
pub mod gaussian;
pub mod ldcvae;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod survival;
