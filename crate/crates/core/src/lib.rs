pub mod ad_generator;
pub mod char_recognizer;
pub mod character_bank;
pub mod config;
pub mod feature_store;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod temporal_proposer;
pub mod vocab;
