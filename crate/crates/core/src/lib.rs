pub mod analysis;
pub mod config;
pub mod dpnoise;
pub mod exec;
pub mod experiment;
pub mod keyexchange;
pub mod protocol;
pub mod regression;
pub mod simnet;
pub mod ring;

/// Client identifier, 0-based.
pub type PartyId = u32;
