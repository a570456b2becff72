pub mod ingest;
pub mod latent;
pub mod metrics;
pub mod network;
pub mod quantizer;
pub mod synthetic;
pub mod tensor;
pub mod volume;
