pub mod attack;
pub mod harness;
pub mod imagecore;
pub mod oracle;
pub mod patchdb;
pub mod projection;
pub mod selection;
pub mod synth;
pub mod trace;
