pub mod attribution;
pub mod cct;
pub mod corpus;
pub mod embed;
pub mod experiments;
pub mod metrics;
pub mod mpifc;
pub mod pipeline;
pub mod rcm;
pub mod rng;
pub mod safety;
pub mod stats;
pub mod store;
