pub mod autoenc;
pub mod image;
pub mod metrics;
pub mod neural;
pub mod segmap;
pub mod synthgen;
pub mod wire;
pub mod channel;
pub mod lddm;
pub mod config;
pub mod pipeline;
