pub mod corpus;
pub mod crf;
pub mod dataset;
pub mod encoder;
pub mod metrics;
pub mod modcls;
pub mod nn;
pub mod pipeline;
pub mod tagheads;
pub mod textprep;
pub mod unitdet;
pub mod workflow;
