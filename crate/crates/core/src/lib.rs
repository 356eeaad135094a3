pub mod corpus;
pub mod encoder;
pub mod gateway;
pub mod keywords;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod retrieval;
pub mod seed;
pub mod stats;
pub mod synthesis;
pub mod text;
pub mod toy;
pub mod trainer;
